//! Homeostatic regularization of the domain-agnostic prompt.
//!
//! Per DAP parameter `i`, the importance `eta_i` accumulates `-g_i * dtheta_i`
//! along the optimization path within the current domain. When a domain
//! shift is detected the Homeostatic Factor is consolidated,
//! `lambda_i += eta_i / (delta_i^2 + xi)` with `delta_i` the total parameter
//! change over the finished domain, the anchor `theta*` is refreshed, and
//! `eta` restarts from zero. The penalty `alpha * sum_i lambda_i (theta_i - theta*_i)^2`
//! then pulls domain-sensitive parameters back towards the anchor.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

/// Default stabilizer in the Homeostatic Factor denominator.
pub const DEFAULT_XI: f64 = 0.01;
/// Default confidence-jump threshold of the shift detector.
pub const DEFAULT_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    eta: Tensor,
    lambda: Tensor,
    theta_star: Tensor,
    theta_domain_start: Tensor,
    domain_index: usize,
    xi: f64,
    nonneg_eta: bool,
}

impl ImportanceState {
    /// Fresh state anchored at the initial DAP values.
    pub fn new(initial_dap: &Tensor, xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::Config(format!("xi must be positive, got {xi}")));
        }
        Ok(Self {
            eta: Tensor::zeros(initial_dap.shape()),
            lambda: Tensor::zeros(initial_dap.shape()),
            theta_star: initial_dap.clone(),
            theta_domain_start: initial_dap.clone(),
            domain_index: 0,
            xi,
            nonneg_eta: false,
        })
    }

    /// Clamp negative accumulated importance to zero before consolidation.
    pub fn with_nonneg_eta(mut self, on: bool) -> Self {
        self.nonneg_eta = on;
        self
    }

    pub fn eta(&self) -> &Tensor {
        &self.eta
    }

    pub fn lambda(&self) -> &Tensor {
        &self.lambda
    }

    pub fn theta_star(&self) -> &Tensor {
        &self.theta_star
    }

    pub fn theta_domain_start(&self) -> &Tensor {
        &self.theta_domain_start
    }

    pub fn domain_index(&self) -> usize {
        self.domain_index
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// `eta_i += -g_i * dtheta_i` for one optimization step.
    pub fn accumulate_importance(&mut self, grad: &Tensor, step: &Tensor) -> Result<()> {
        self.eta.expect_same_shape(grad, "accumulate_importance(grad)")?;
        self.eta.expect_same_shape(step, "accumulate_importance(step)")?;
        for ((e, g), d) in self.eta.data_mut().iter_mut().zip(grad.data()).zip(step.data()) {
            *e -= g * d;
        }
        Ok(())
    }

    /// Folds the finished domain into the Homeostatic Factor and opens a new
    /// domain at `current_dap`.
    pub fn consolidate_on_shift(&mut self, current_dap: &Tensor) -> Result<()> {
        self.eta.expect_same_shape(current_dap, "consolidate_on_shift")?;
        let xi = self.xi;
        let clamp = self.nonneg_eta;
        for (((l, &e), &now), &start) in self
            .lambda
            .data_mut()
            .iter_mut()
            .zip(self.eta.data())
            .zip(current_dap.data())
            .zip(self.theta_domain_start.data())
        {
            let e = if clamp { e.max(0.0) } else { e };
            let delta = now - start;
            *l += e / (delta * delta + xi);
        }
        self.theta_star = current_dap.clone();
        self.theta_domain_start = current_dap.clone();
        self.eta.data_mut().fill(0.0);
        self.domain_index += 1;
        Ok(())
    }

    /// `alpha * sum_i lambda_i (theta_i - theta*_i)^2` and its gradient
    /// `2 alpha lambda_i (theta_i - theta*_i)`.
    pub fn penalty(&self, theta: &Tensor, alpha: f64) -> Result<(f64, Tensor)> {
        self.theta_star.expect_same_shape(theta, "penalty")?;
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(theta.shape());
        for (((g, &l), &t), &s) in grad
            .data_mut()
            .iter_mut()
            .zip(self.lambda.data())
            .zip(theta.data())
            .zip(self.theta_star.data())
        {
            let d = t - s;
            loss += l * d * d;
            *g = 2.0 * alpha * l * d;
        }
        Ok((alpha * loss, grad))
    }

    #[doc(hidden)]
    pub fn set_lambda(&mut self, lambda: Tensor) -> Result<(), TensorError> {
        self.lambda.expect_same_shape(&lambda, "set_lambda")?;
        self.lambda = lambda;
        Ok(())
    }
}

/// Outcome of feeding one batch confidence to the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftDecision {
    pub triggered: bool,
    /// `current - previous`; `None` on the first batch.
    pub delta: Option<f64>,
}

/// Flags a domain shift when the batch-mean confidence moves by more than
/// the threshold between consecutive batches.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    previous: Option<f64>,
    threshold: f64,
    signed: bool,
}

impl DetectorState {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::Config(format!("shift threshold must be positive, got {threshold}")));
        }
        Ok(Self {
            previous: None,
            threshold,
            signed: false,
        })
    }

    /// Use the literal signed test `delta > S` instead of `|delta| > S`.
    pub fn with_signed_delta(mut self, on: bool) -> Self {
        self.signed = on;
        self
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn previous(&self) -> Option<f64> {
        self.previous
    }

    pub fn detect_shift(&mut self, confidence: f64) -> Result<ShiftDecision> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::OutOfRange(format!("batch confidence {confidence}")));
        }
        let decision = shift_decision(self.previous, confidence, self.threshold, self.signed);
        self.previous = Some(confidence);
        Ok(decision)
    }
}

/// The detector rule as a pure function.
pub fn shift_decision(previous: Option<f64>, current: f64, threshold: f64, signed: bool) -> ShiftDecision {
    match previous {
        None => ShiftDecision {
            triggered: false,
            delta: None,
        },
        Some(prev) => {
            let delta = current - prev;
            let moved = if signed { delta } else { delta.abs() };
            ShiftDecision {
                triggered: moved > threshold,
                delta: Some(delta),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn importance_step_contribution() {
        let mut s = ImportanceState::new(&t(&[0.0]), DEFAULT_XI).unwrap();
        s.accumulate_importance(&t(&[2.0]), &t(&[-0.2])).unwrap();
        assert!((s.eta().item() - 0.4).abs() < 1e-15);
        let before = s.eta().clone();
        s.accumulate_importance(&t(&[5.0]), &t(&[0.0])).unwrap();
        assert_eq!(s.eta(), &before);
        assert!(s.accumulate_importance(&t(&[1.0, 2.0]), &t(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn consolidation_worked_example() {
        // eta = 2.0, delta = 0.1, xi = 0.01 -> 2.0 / (0.01 + 0.01) = 100
        let mut s = ImportanceState::new(&t(&[0.0]), 0.01).unwrap();
        s.eta = t(&[2.0]);
        s.consolidate_on_shift(&t(&[0.1])).unwrap();
        assert!((s.lambda().item() - 100.0).abs() < 1e-9);
        assert_eq!(s.theta_star().item(), 0.1);
        assert_eq!(s.eta().item(), 0.0);
        assert_eq!(s.domain_index(), 1);
    }

    #[test]
    fn zero_eta_leaves_lambda_and_refreshes_anchor() {
        let mut s = ImportanceState::new(&t(&[0.3]), 0.01).unwrap();
        s.consolidate_on_shift(&t(&[0.7])).unwrap();
        assert_eq!(s.lambda().item(), 0.0);
        assert_eq!(s.theta_star().item(), 0.7);
        assert_eq!(s.theta_domain_start().item(), 0.7);
    }

    #[test]
    fn lambda_is_a_running_sum() {
        let mut s = ImportanceState::new(&t(&[0.0]), 0.01).unwrap();
        s.eta = t(&[1.5]);
        s.consolidate_on_shift(&t(&[0.2])).unwrap();
        s.eta = t(&[0.5]);
        s.consolidate_on_shift(&t(&[0.5])).unwrap();
        let want = 1.5 / (0.04 + 0.01) + 0.5 / (0.09 + 0.01);
        assert!((s.lambda().item() - want).abs() < 1e-12);
    }

    #[test]
    fn nonneg_clamp_drops_negative_importance() {
        let mut s = ImportanceState::new(&t(&[0.0, 0.0]), 0.01).unwrap().with_nonneg_eta(true);
        s.eta = t(&[-1.0, 1.0]);
        s.consolidate_on_shift(&t(&[0.0, 0.0])).unwrap();
        assert_eq!(s.lambda().data(), &[0.0, 100.0]);
    }

    #[test]
    fn penalty_worked_example() {
        let mut s = ImportanceState::new(&t(&[0.1]), 0.01).unwrap();
        s.set_lambda(t(&[1.0])).unwrap();
        let (loss, grad) = s.penalty(&t(&[0.3]), 2.0).unwrap();
        assert!((loss - 0.08).abs() < 1e-15);
        assert!((grad.item() - 0.8).abs() < 1e-15);
        let (loss, grad) = s.penalty(&t(&[0.3]), 0.0).unwrap();
        assert_eq!((loss, grad.item()), (0.0, 0.0));
        let (loss, _) = s.penalty(&t(&[0.1]), 2.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn detector_examples() {
        let mut d = DetectorState::new(DEFAULT_THRESHOLD).unwrap();
        assert!(!d.detect_shift(0.90).unwrap().triggered);
        let hit = d.detect_shift(0.60).unwrap();
        assert!(hit.triggered);
        assert!((hit.delta.unwrap() + 0.30).abs() < 1e-12);

        let mut d = DetectorState::new(DEFAULT_THRESHOLD).unwrap();
        d.detect_shift(0.90).unwrap();
        assert!(!d.detect_shift(0.70).unwrap().triggered);
        assert!(d.detect_shift(1.2).is_err());
    }

    #[test]
    fn signed_detector_ignores_drops() {
        let mut d = DetectorState::new(0.25).unwrap().with_signed_delta(true);
        d.detect_shift(0.9).unwrap();
        assert!(!d.detect_shift(0.5).unwrap().triggered);
        assert!(d.detect_shift(0.9).unwrap().triggered);
    }

    proptest! {
        #[test]
        fn penalty_gradient_matches_finite_differences(
            lambda in proptest::collection::vec(0.0f64..50.0, 4),
            theta in proptest::collection::vec(-1.0f64..1.0, 4),
            star in proptest::collection::vec(-1.0f64..1.0, 4),
            alpha in 0.0f64..3.0,
        ) {
            let mut s = ImportanceState::new(&t(&star), 0.01).unwrap();
            s.set_lambda(t(&lambda)).unwrap();
            let (_, grad) = s.penalty(&t(&theta), alpha).unwrap();
            let h = 1e-6;
            let scale = grad.data().iter().fold(1e-8f64, |m, g| m.max(g.abs()));
            for i in 0..4 {
                let mut up = theta.clone();
                up[i] += h;
                let mut down = theta.clone();
                down[i] -= h;
                let fd = (s.penalty(&t(&up), alpha).unwrap().0 - s.penalty(&t(&down), alpha).unwrap().0) / (2.0 * h);
                prop_assert!((fd - grad.data()[i]).abs() / scale <= 1e-8, "{} vs {}", fd, grad.data()[i]);
            }
        }

        #[test]
        fn detector_is_pure(prev in 0.0f64..=1.0, cur in 0.0f64..=1.0) {
            let mut a = DetectorState::new(0.25).unwrap();
            a.detect_shift(prev).unwrap();
            let da = a.detect_shift(cur).unwrap();
            prop_assert_eq!(da, shift_decision(Some(prev), cur, 0.25, false));
        }

        #[test]
        fn consolidation_replay_is_bit_identical(events in proptest::collection::vec((-2.0f64..2.0, -1.0f64..1.0), 1..6)) {
            let run = || {
                let mut s = ImportanceState::new(&t(&[0.0]), 0.01).unwrap();
                for &(eta, theta) in &events {
                    s.eta = t(&[eta]);
                    s.consolidate_on_shift(&t(&[theta])).unwrap();
                }
                s.lambda().item().to_bits()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
