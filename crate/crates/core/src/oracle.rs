//! Finite-difference gradient oracle over randomly generated tape graphs.
//!
//! Every graph strings together all tape operations (patch addition,
//! convolution in both padding modes, elementwise add/mul, relu, pooling,
//! flatten, affine, softmax, log, log-softmax, sum and soft cross-entropy)
//! with random shapes and values, and its reverse-mode gradients are
//! compared against central differences on every leaf element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::homeostasis::{ImportanceState, DEFAULT_XI};
use crate::tensor::{NodeId, Padding, Tape, Tensor, TensorError};

pub const FD_STEP: f64 = 1e-6;
/// Graphs whose relu inputs come closer than this to the kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// A sampled graph: leaf values plus the structural choices that rebuild it.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    leaves: Vec<Tensor>,
    teacher: Tensor,
    patch_at: (usize, usize),
    padding: Padding,
    /// Loss head: soft cross-entropy on log-softmax, or sum(log(softmax) * w).
    ce_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(max |numeric|, 1e-8)` over all leaves.
    pub max_rel_error: f64,
    pub checked: usize,
}

fn normal(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

impl RandomGraph {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let batch = rng.random_range(1..=2);
        let ch = rng.random_range(1..=2);
        let hw = rng.random_range(5..=7);
        let k = rng.random_range(1..=2) * 2 + 1;
        let k = k.min(hw);
        let out_ch = rng.random_range(1..=3);
        let padding = if rng.random::<bool>() { Padding::Same } else { Padding::Valid };
        let conv_hw = if padding == Padding::Same { hw } else { hw - k + 1 };
        let conv_hw = if conv_hw < 2 { hw } else { conv_hw };
        let padding = if conv_hw == hw { Padding::Same } else { padding };
        let features = out_ch * (conv_hw / 2) * (conv_hw / 2);
        let classes = rng.random_range(2..=4);
        let ph = rng.random_range(1..=hw);
        let pw = rng.random_range(1..=hw);
        let patch_at = (rng.random_range(0..=hw - ph), rng.random_range(0..=hw - pw));

        let mut teacher = normal(&[batch, classes], 1.0, rng);
        for row in teacher.data_mut().chunks_exact_mut(classes) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let leaves = vec![
            normal(&[batch, ch, hw, hw], 1.0, rng),
            normal(&[ch, ph, pw], 0.5, rng),
            normal(&[out_ch, ch, k, k], 0.5, rng),
            normal(&[out_ch], 0.5, rng),
            normal(&[out_ch, conv_hw, conv_hw], 0.5, rng),
            normal(&[out_ch, conv_hw, conv_hw], 0.5, rng),
            normal(&[classes, features], 0.5, rng),
            normal(&[classes], 0.5, rng),
            normal(&[batch, classes], 1.0, rng),
        ];
        Self {
            leaves,
            teacher,
            patch_at,
            padding,
            ce_head: rng.random::<bool>(),
        }
    }

    /// Builds the graph on `tape`; returns the loss node, the leaf ids and
    /// the relu input nodes.
    fn build(&self, tape: &mut Tape, leaves: &[Tensor]) -> Result<(NodeId, Vec<NodeId>, Vec<NodeId>), TensorError> {
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let [x, patch, w, b, scale, shift, w2, b2, head_w] = ids[..] else {
            unreachable!("nine leaves")
        };
        let x = tape.add_patch(x, patch, self.patch_at.0, self.patch_at.1)?;
        let z = tape.conv2d(x, w, b, self.padding)?;
        let z = broadcast_mul_add(tape, z, scale, shift)?;
        let a = tape.relu(z)?;
        let pooled = tape.avgpool2(a)?;
        let flat = tape.flatten(pooled)?;
        let logits = tape.affine(flat, w2, b2)?;
        let loss = if self.ce_head {
            let lp = tape.log_softmax(logits)?;
            tape.soft_cross_entropy(&self.teacher, lp)?
        } else {
            let p = tape.softmax(logits)?;
            let lp = tape.log(p)?;
            let weighted = tape.mul(lp, head_w)?;
            tape.sum(weighted)?
        };
        Ok((loss, ids, vec![z]))
    }

    fn loss_at(&self, leaves: &[Tensor]) -> Result<f64, TensorError> {
        let mut tape = Tape::unarmed();
        let (loss, _, _) = self.build(&mut tape, leaves)?;
        Ok(tape.value(loss).item())
    }

    pub fn near_kink(&self) -> Result<bool, TensorError> {
        let mut tape = Tape::unarmed();
        let (_, _, relus) = self.build(&mut tape, &self.leaves)?;
        Ok(relus
            .iter()
            .any(|&r| tape.value(r).data().iter().any(|v| v.abs() < KINK_MARGIN)))
    }

    pub fn check(&self) -> Result<GradCheck, TensorError> {
        let mut tape = Tape::new();
        let (loss, ids, _) = self.build(&mut tape, &self.leaves)?;
        let grads = tape.backward(loss)?;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (li, id) in ids.iter().enumerate() {
            // leaves the loss never reaches (the unused head weight) get none
            let zero = Tensor::zeros(self.leaves[li].shape());
            let analytic = grads.get(*id).unwrap_or(&zero);
            let mut numeric = Vec::with_capacity(analytic.len());
            for e in 0..analytic.len() {
                let mut up = self.leaves.clone();
                up[li].data_mut()[e] += FD_STEP;
                let mut down = self.leaves.clone();
                down[li].data_mut()[e] -= FD_STEP;
                numeric.push((self.loss_at(&up)? - self.loss_at(&down)?) / (2.0 * FD_STEP));
            }
            let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            let diff = analytic
                .data()
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            worst = worst.max(diff / scale);
            checked += numeric.len();
        }
        Ok(GradCheck {
            max_rel_error: worst,
            checked,
        })
    }
}

/// `z * scale + shift` with `[c, h, w]` factors broadcast over the batch
/// by patching them onto a zero tensor.
fn broadcast_mul_add(tape: &mut Tape, z: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId, TensorError> {
    let zero = tape.constant(Tensor::zeros(tape.value(z).shape()));
    let s = tape.add_patch(zero, scale, 0, 0)?;
    let t = tape.add_patch(zero, shift, 0, 0)?;
    let zs = tape.mul(z, s)?;
    tape.add(zs, t)
}

/// Draws `count` graphs from `seed`, redrawing near-kink samples, and
/// checks each one.
pub fn run_gradcheck(count: usize, seed: u64) -> Result<Vec<GradCheck>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let g = RandomGraph::sample(&mut rng);
        if g.near_kink()? {
            continue;
        }
        out.push(g.check()?);
    }
    Ok(out)
}

/// Gradient descent on `L = theta^2 / 2` from `theta = 1`, accumulating
/// importance with the step's starting gradient. Returns
/// `|sum(eta) - (L_start - L_end)| / L_start`.
pub fn quadratic_path_integral_error(lr: f64, steps: usize) -> f64 {
    let loss = |t: f64| 0.5 * t * t;
    let mut theta = 1.0;
    let mut state = ImportanceState::new(&Tensor::scalar(theta), DEFAULT_XI).expect("positive xi");
    for _ in 0..steps {
        let g = theta;
        let step = -lr * g;
        state
            .accumulate_importance(&Tensor::scalar(g), &Tensor::scalar(step))
            .expect("scalar shapes");
        theta += step;
    }
    let start = loss(1.0);
    (state.eta().item() - (start - loss(theta))).abs() / start
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_random_graphs_match_finite_differences() {
        let results = run_gradcheck(50, 2024).unwrap();
        let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        eprintln!("gradcheck: {} graphs, worst relative error {worst:e}", results.len());
        assert!(worst <= 1e-5, "worst relative error {worst:e}");
    }

    #[test]
    fn both_heads_and_paddings_are_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let graphs: Vec<RandomGraph> = (0..50).map(|_| RandomGraph::sample(&mut rng)).collect();
        assert!(graphs.iter().any(|g| g.ce_head) && graphs.iter().any(|g| !g.ce_head));
        assert!(graphs.iter().any(|g| g.padding == Padding::Same));
        assert!(graphs.iter().any(|g| g.padding == Padding::Valid));
    }

    #[test]
    fn path_integral_error_matches_closed_form() {
        // sum(eta) / (L_start - L_end) = 1 / (1 - lr / 2) on this trajectory
        for lr in [0.1, 0.01] {
            let decrease = 0.5 * (1.0 - (1.0f64 - lr).powi(100));
            let want = decrease * (1.0 / (1.0 - lr / 2.0) - 1.0) / 0.5;
            assert!((quadratic_path_integral_error(lr, 50) - want).abs() < 1e-12);
        }
        assert!(quadratic_path_integral_error(0.01, 50) < quadratic_path_integral_error(0.1, 50));
    }
}
