//! Online teacher-student adaptation of the two prompts on an unlabeled
//! stream.
//!
//! Per batch: predict with the current teacher prompts, feed the batch
//! confidence to the shift detector (consolidating the homeostatic state on
//! a trigger), then take one SGD step on the student prompts under soft
//! cross-entropy against the teacher's predictions on augmented inputs, and
//! finally move the teacher towards the student by EMA.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::{Classifier, Prediction};
use crate::data::stream::DomainStream;
use crate::error::{Error, Result};
use crate::homeostasis::{DetectorState, ImportanceState, ShiftDecision, DEFAULT_THRESHOLD, DEFAULT_XI};
use crate::prompt::{PlacementPolicy, PromptPair};
use crate::seed::{derive_seed, Stream};
use crate::tensor::{softmax_rows, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentPolicy {
    Identity,
    /// Horizontal flip with p = 0.5, integer translation within +-2 px with
    /// zero fill, additive Gaussian noise with sigma 0.02.
    FlipShiftNoise,
}

pub const AUGMENT_MAX_SHIFT: i64 = 2;
pub const AUGMENT_NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub lr: f64,
    pub ema_momentum: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub xi: f64,
    pub batch_size: usize,
    pub augment: AugmentPolicy,
    pub placement: PlacementPolicy,
    pub dsp_size: (usize, usize),
    pub dap_size: (usize, usize),
    pub offset: isize,
    pub seed: u64,
    pub update_dsp: bool,
    pub update_dap: bool,
    pub signed_delta: bool,
    pub nonneg_eta: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            ema_momentum: 0.999,
            alpha: 1.0,
            threshold: DEFAULT_THRESHOLD,
            xi: DEFAULT_XI,
            batch_size: 100,
            augment: AugmentPolicy::FlipShiftNoise,
            placement: PlacementPolicy::RandomPerBatch,
            dsp_size: (8, 8),
            dap_size: (8, 8),
            offset: 0,
            seed: 7,
            update_dsp: true,
            update_dap: true,
            signed_delta: false,
            nonneg_eta: false,
        }
    }
}

impl AdaptConfig {
    /// `lr = 0` is accepted: it is the frozen-evaluation baseline.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema momentum must lie in [0, 1), got {}", self.ema_momentum));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return bad(format!("shift threshold must be > 0, got {}", self.threshold));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return bad(format!("xi must be > 0, got {}", self.xi));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        Ok(())
    }

    pub fn prompts(&self, model: &Classifier) -> Result<PromptPair> {
        PromptPair::zeros(model.geometry(), self.dsp_size, self.dap_size, self.placement, self.offset)
    }
}

/// `h(x)` under `policy`, drawing from `rng`.
pub fn augment<R: Rng + ?Sized>(images: &Tensor, policy: AugmentPolicy, rng: &mut R) -> Result<Tensor> {
    if policy == AugmentPolicy::Identity {
        return Ok(images.clone());
    }
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Geometry {
            expected: vec![0, 0, 0, 0],
            found: s.to_vec(),
        });
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let noise = Normal::new(0.0, AUGMENT_NOISE_SIGMA).expect("positive sigma");
    let mut out = Tensor::zeros(s);
    for (src, dst) in images.data().chunks_exact(c * h * w).zip(out.data_mut().chunks_exact_mut(c * h * w)) {
        let flip = rng.random::<bool>();
        let dy = rng.random_range(-AUGMENT_MAX_SHIFT..=AUGMENT_MAX_SHIFT) as isize;
        let dx = rng.random_range(-AUGMENT_MAX_SHIFT..=AUGMENT_MAX_SHIFT) as isize;
        for ch in 0..c {
            for y in 0..h as isize {
                let sy = y - dy;
                if !(0..h as isize).contains(&sy) {
                    continue;
                }
                for x in 0..w as isize {
                    let sx = x - dx;
                    if !(0..w as isize).contains(&sx) {
                        continue;
                    }
                    let sx = if flip { w as isize - 1 - sx } else { sx };
                    dst[(ch * h + y as usize) * w + x as usize] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        dst.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    Ok(out)
}

/// Mirrors every image left to right.
pub fn flip_horizontal(images: &Tensor) -> Tensor {
    let w = *images.shape().last().expect("non-empty shape");
    let mut out = images.clone();
    out.data_mut().chunks_exact_mut(w).for_each(|row| row.reverse());
    out
}

/// `teacher = m * teacher + (1 - m) * student` on both patches.
pub fn ema_update(teacher: &mut PromptPair, student: &PromptPair, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("ema momentum must lie in [0, 1), got {m}")));
    }
    for (t, s) in [
        (&mut teacher.dsp.values, &student.dsp.values),
        (&mut teacher.dap.values, &student.dap.values),
    ] {
        t.expect_same_shape(s, "ema_update")?;
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// What one adaptation step observed and did.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Evaluation predictions, made before any update on this batch.
    pub prediction: Prediction,
    pub confidence: f64,
    pub decision: ShiftDecision,
    pub loss_dsp: f64,
    pub loss_dap: f64,
    pub loss_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptState {
    pub student: PromptPair,
    pub teacher: PromptPair,
    pub importance: ImportanceState,
    pub detector: DetectorState,
    pub step: usize,
    cfg: AdaptConfig,
}

impl AdaptState {
    /// Teacher and student both start from `prompts`; the importance anchor
    /// is the initial DAP.
    pub fn new(prompts: PromptPair, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            importance: ImportanceState::new(&prompts.dap.values, cfg.xi)?.with_nonneg_eta(cfg.nonneg_eta),
            detector: DetectorState::new(cfg.threshold)?.with_signed_delta(cfg.signed_delta),
            teacher: prompts.clone(),
            student: prompts,
            step: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    /// One online step on an unlabeled batch.
    pub fn adapt_batch(&mut self, model: &Classifier, images: &Tensor) -> Result<StepOutcome> {
        if !model.is_frozen() {
            return Err(Error::Config("adaptation requires a frozen classifier".into()));
        }
        let geometry = model.geometry();
        geometry.check(images)?;
        let step = self.step;
        let placement =
            self.student
                .placement_for_batch(geometry, derive_seed(self.cfg.seed, Stream::Placement, 0), step as u64)?;

        let teacher_input = self.teacher.apply(images, &placement)?;
        let prediction = model.predict(&teacher_input)?;
        let confidence = prediction.mean_confidence();
        let decision = self.detector.detect_shift(confidence)?;
        if decision.triggered {
            self.importance.consolidate_on_shift(&self.student.dap.values)?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, Stream::Augment, step as u64));
        let augmented = augment(&teacher_input, self.cfg.augment, &mut rng)?;
        let targets = softmax_rows(&model.logits(&augmented)?)?;

        let mut tape = Tape::new();
        let xs = tape.leaf(self.student.apply(images, &placement)?);
        let fwd = model.forward(&mut tape, xs)?;
        let lp = tape.log_softmax(fwd.logits)?;
        let loss = tape.soft_cross_entropy(&targets, lp)?;
        let ce = tape.value(loss).item();
        let (penalty, g_penalty) = self.importance.penalty(&self.student.dap.values, self.cfg.alpha)?;
        if !(ce.is_finite() && penalty.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!("self-training loss {ce}, penalty {penalty}"),
            });
        }
        let mut grads = tape.backward(loss)?;
        let g_input = grads.remove(xs).expect("student input is a leaf");
        let (g_dsp, mut g_dap) = self.student.prompt_gradients(&g_input, &placement)?;
        g_dap.add_scaled(&g_penalty, 1.0)?;

        let lr = self.cfg.lr;
        if self.cfg.update_dsp {
            self.student.dsp.values.add_scaled(&g_dsp, -lr)?;
        }
        if self.cfg.update_dap {
            let delta = g_dap.map(|g| -lr * g);
            self.student.dap.values.add_scaled(&delta, 1.0)?;
            self.importance.accumulate_importance(&g_dap, &delta)?;
        }
        ema_update(&mut self.teacher, &self.student, self.cfg.ema_momentum)?;
        self.step += 1;

        Ok(StepOutcome {
            prediction,
            confidence,
            decision,
            loss_dsp: ce,
            loss_dap: ce + penalty,
            loss_penalty: penalty,
        })
    }
}

/// One CSV row of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Index of the true domain segment.
    pub domain_truth: usize,
    pub corruption: String,
    pub severity: u8,
    pub round: usize,
    pub batch_size: usize,
    pub batch_error: f64,
    pub confidence: f64,
    pub delta_conf: Option<f64>,
    pub shift_triggered: bool,
    pub loss_dsp: f64,
    pub loss_dap: f64,
    pub loss_penalty: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,domain_truth,corruption,severity,round,batch_size,batch_error,confidence,delta_conf,shift_triggered,loss_dsp,loss_dap,loss_penalty";

    /// Mean of the per-batch errors.
    pub fn mean_error(&self) -> f64 {
        self.rows.iter().map(|r| r.batch_error).sum::<f64>() / self.rows.len() as f64
    }

    /// Floats use Rust's shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.domain_truth,
                r.corruption,
                r.severity,
                r.round,
                r.batch_size,
                r.batch_error,
                r.confidence,
                r.delta_conf.map_or(String::new(), |d| d.to_string()),
                u8::from(r.shift_triggered),
                r.loss_dsp,
                r.loss_dap,
                r.loss_penalty
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Config("metrics CSV header mismatch".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Config(format!("metrics CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            rows.push(MetricsRow {
                step: f[0].parse().map_err(|_| bad())?,
                domain_truth: f[1].parse().map_err(|_| bad())?,
                corruption: f[2].to_string(),
                severity: f[3].parse().map_err(|_| bad())?,
                round: f[4].parse().map_err(|_| bad())?,
                batch_size: f[5].parse().map_err(|_| bad())?,
                batch_error: num(f[6])?,
                confidence: num(f[7])?,
                delta_conf: if f[8].is_empty() { None } else { Some(num(f[8])?) },
                shift_triggered: match f[9] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
                loss_dsp: num(f[10])?,
                loss_dap: num(f[11])?,
                loss_penalty: num(f[12])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Runs [`AdaptState::adapt_batch`] over the stream in order. Labels and
/// domain tags are read only after each step, to score it.
pub fn run_stream(state: &mut AdaptState, model: &Classifier, stream: &DomainStream) -> Result<MetricsLog> {
    if stream.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut log = MetricsLog::default();
    for batch in &stream.batches {
        let out = state.adapt_batch(model, &batch.images)?;
        let truth = &batch.truth;
        log.rows.push(MetricsRow {
            step: state.step - 1,
            domain_truth: truth.segment,
            corruption: truth.domain.family_name().to_string(),
            severity: truth.domain.severity,
            round: truth.round,
            batch_size: truth.labels.len(),
            batch_error: out.prediction.error_rate(&truth.labels),
            confidence: out.confidence,
            delta_conf: out.decision.delta,
            shift_triggered: out.decision.triggered,
            loss_dsp: out.loss_dsp,
            loss_dap: out.loss_dap,
            loss_penalty: out.loss_penalty,
        });
    }
    Ok(log)
}

/// Per-batch errors of the bare frozen model on the same stream.
pub fn source_only_errors(model: &Classifier, stream: &DomainStream) -> Result<Vec<f64>> {
    stream
        .batches
        .iter()
        .map(|b| Ok(model.predict(&b.images)?.error_rate(&b.truth.labels)))
        .collect()
}
