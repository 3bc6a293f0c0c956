//! Learnable additive image prompts and their placement.
//!
//! A prompted image is `x + dsp + dap`, each patch added pointwise on its own
//! support; pixels outside both supports are untouched and overlapping pixels
//! receive both additions.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::classifier::{one_hot, Classifier, Geometry};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, Stream};
use crate::tensor::{tape, NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Domain-specific prompt, trained with plain self-training loss.
    Dsp,
    /// Domain-agnostic prompt, additionally anchored by the homeostatic penalty.
    Dap,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Dsp => "dsp",
            Role::Dap => "dap",
        })
    }
}

/// A `[channels, h, w]` additive patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPatch {
    pub role: Role,
    pub values: Tensor,
}

impl PromptPatch {
    pub fn zeros(role: Role, channels: usize, height: usize, width: usize) -> Self {
        Self {
            role,
            values: Tensor::zeros(&[channels, height, width]),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    /// The DSP always sits at this top-left anchor.
    Fixed { row: usize, col: usize },
    /// A fresh uniformly drawn DSP anchor for every batch.
    RandomPerBatch,
}

/// Top-left anchors of both patches for one batch. Always in bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    dsp: (usize, usize),
    dap: (usize, usize),
}

impl Placement {
    /// Validates both anchors against the image geometry.
    pub fn new(geometry: Geometry, pair: &PromptPair, dsp: (usize, usize), dap: (usize, usize)) -> Result<Self> {
        for (role, (r, c), (h, w)) in [
            (Role::Dsp, dsp, pair.dsp.size()),
            (Role::Dap, dap, pair.dap.size()),
        ] {
            if r + h > geometry.height || c + w > geometry.width {
                return Err(Error::Placement(format!(
                    "{role} patch {h}x{w} at ({r},{c}) leaves the {}x{} image",
                    geometry.height, geometry.width
                )));
            }
        }
        Ok(Self { dsp, dap })
    }

    pub fn dsp(&self) -> (usize, usize) {
        self.dsp
    }

    pub fn dap(&self) -> (usize, usize) {
        self.dap
    }
}

/// The two prompts plus the placement policy they are applied with.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub dsp: PromptPatch,
    pub dap: PromptPatch,
    pub policy: PlacementPolicy,
    /// Signed column distance from the DSP anchor to the DAP anchor; rows
    /// are aligned. Negative puts the DAP on the left.
    pub offset: isize,
}

impl PromptPair {
    /// Zero-initialized prompts, validated to fit the image.
    pub fn zeros(
        geometry: Geometry,
        dsp_size: (usize, usize),
        dap_size: (usize, usize),
        policy: PlacementPolicy,
        offset: isize,
    ) -> Result<Self> {
        for (role, (h, w)) in [(Role::Dsp, dsp_size), (Role::Dap, dap_size)] {
            if h == 0 || w == 0 || h > geometry.height || w > geometry.width {
                return Err(Error::Placement(format!(
                    "{role} size {h}x{w} does not fit a {}x{} image",
                    geometry.height, geometry.width
                )));
            }
        }
        let pair = Self {
            dsp: PromptPatch::zeros(Role::Dsp, geometry.channels, dsp_size.0, dsp_size.1),
            dap: PromptPatch::zeros(Role::Dap, geometry.channels, dap_size.0, dap_size.1),
            policy,
            offset,
        };
        if let PlacementPolicy::Fixed { row, col } = policy {
            pair.anchored(geometry, row, col)?;
        }
        Ok(pair)
    }

    fn anchored(&self, geometry: Geometry, row: usize, col: usize) -> Result<Placement> {
        let (dh, dw) = self.dap.size();
        let dap_row = row.min(geometry.height - dh);
        let dap_col = (col as isize + self.offset).clamp(0, (geometry.width - dw) as isize) as usize;
        Placement::new(geometry, self, (row, col), (dap_row, dap_col))
    }

    /// Fixed policy: the configured anchor. Random policy: a DSP anchor drawn
    /// uniformly over every in-bounds position. The DAP follows at the
    /// configured column offset, clipped into the image.
    pub fn sample_placement<R: Rng + ?Sized>(&self, geometry: Geometry, rng: &mut R) -> Result<Placement> {
        match self.policy {
            PlacementPolicy::Fixed { row, col } => self.anchored(geometry, row, col),
            PlacementPolicy::RandomPerBatch => {
                let (h, w) = self.dsp.size();
                if h > geometry.height || w > geometry.width {
                    return Err(Error::Placement(format!(
                        "no valid anchor for a {h}x{w} patch on a {}x{} image",
                        geometry.height, geometry.width
                    )));
                }
                let row = rng.random_range(0..=geometry.height - h);
                let col = rng.random_range(0..=geometry.width - w);
                self.anchored(geometry, row, col)
            }
        }
    }

    /// Placement for batch `index` of a run seeded with `seed`.
    pub fn placement_for_batch(&self, geometry: Geometry, seed: u64, index: u64) -> Result<Placement> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Placement, index));
        self.sample_placement(geometry, &mut rng)
    }

    /// `images + dsp + dap` on their supports.
    pub fn apply(&self, images: &Tensor, placement: &Placement) -> Result<Tensor> {
        let (r, c) = placement.dsp;
        let x = tape::add_patch_value(images, &self.dsp.values, r, c)?;
        let (r, c) = placement.dap;
        Ok(tape::add_patch_value(&x, &self.dap.values, r, c)?)
    }

    /// Records the prompted input on a tape with both patches as leaves.
    pub fn record(&self, tape: &mut Tape, images: NodeId, placement: &Placement) -> Result<(NodeId, NodeId, NodeId)> {
        let dsp = tape.leaf(self.dsp.values.clone());
        let dap = tape.leaf(self.dap.values.clone());
        let (r, c) = placement.dsp;
        let x = tape.add_patch(images, dsp, r, c)?;
        let (r, c) = placement.dap;
        let x = tape.add_patch(x, dap, r, c)?;
        Ok((x, dsp, dap))
    }

    /// Gradients of a loss with respect to both patches, given its gradient
    /// with respect to the prompted input: the batch sum of the input
    /// gradient over each patch's support.
    pub fn prompt_gradients(&self, grad_input: &Tensor, placement: &Placement) -> Result<(Tensor, Tensor)> {
        let s = grad_input.shape();
        if s.len() != 4 || s[1] != self.dsp.values.shape()[0] {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "prompt_gradients",
                left: s.to_vec(),
                right: self.dsp.values.shape().to_vec(),
            }));
        }
        let geometry = Geometry::new(s[1], s[2], s[3]);
        Placement::new(geometry, self, placement.dsp, placement.dap)?;
        let (r, c) = placement.dsp;
        let g_dsp = tape::patch_grad(grad_input, self.dsp.values.shape(), r, c);
        let (r, c) = placement.dap;
        let g_dap = tape::patch_grad(grad_input, self.dap.values.shape(), r, c);
        Ok((g_dsp, g_dap))
    }

    pub fn write_into(&self, c: &mut Checkpoint, prefix: &str) {
        c.push_tensor(&format!("{prefix}.dsp"), self.dsp.values.clone());
        c.push_tensor(&format!("{prefix}.dap"), self.dap.values.clone());
        let policy = match self.policy {
            PlacementPolicy::Fixed { row, col } => format!("fixed {row} {col}"),
            PlacementPolicy::RandomPerBatch => "random".to_string(),
        };
        c.set_meta(&format!("{prefix}.policy"), policy);
        c.set_meta(&format!("{prefix}.offset"), self.offset);
    }

    pub fn read_from(c: &Checkpoint, prefix: &str) -> Result<Self> {
        let policy_key = format!("{prefix}.policy");
        let invalid = |reason: &str| CheckpointError::InvalidMeta {
            key: policy_key.clone(),
            reason: reason.into(),
        };
        let policy = match c.require_meta(&policy_key)?.split(' ').collect::<Vec<_>>()[..] {
            ["random"] => PlacementPolicy::RandomPerBatch,
            ["fixed", r, col] => PlacementPolicy::Fixed {
                row: r.parse().map_err(|_| invalid("bad row"))?,
                col: col.parse().map_err(|_| invalid("bad col"))?,
            },
            _ => return Err(invalid("unknown policy").into()),
        };
        let read = |role: Role| -> Result<PromptPatch> {
            let t = c.require_tensor(&format!("{prefix}.{role}"))?;
            if t.ndim() != 3 {
                return Err(CheckpointError::Geometry {
                    name: format!("{prefix}.{role}"),
                    expected: vec![0, 0, 0],
                    found: t.shape().to_vec(),
                }
                .into());
            }
            Ok(PromptPatch {
                role,
                values: t.clone(),
            })
        };
        Ok(Self {
            dsp: read(Role::Dsp)?,
            dap: read(Role::Dap)?,
            policy,
            offset: c.parse_meta(&format!("{prefix}.offset"))?,
        })
    }
}

/// Source-domain warm-up of the prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_dsp: bool,
    pub train_dap: bool,
}

/// Starts both patches at zero and minimizes the frozen model's hard-label
/// cross-entropy on prompted source images for `cfg.epochs` epochs. Only
/// enabled patches move.
pub fn init_prompts(
    pair: &PromptPair,
    images: &Tensor,
    labels: &[usize],
    model: &Classifier,
    cfg: &WarmupConfig,
) -> Result<PromptPair> {
    let geometry = model.geometry();
    let n = geometry.check(images)?;
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != n {
        return Err(Error::Config(format!("{n} images but {} labels", labels.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("warm-up batch size must be >= 1".into()));
    }
    let mut warmed = pair.clone();
    warmed.dsp.values.data_mut().fill(0.0);
    warmed.dap.values.data_mut().fill(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Warmup, 0));
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_index = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = images.select_outer(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let placement = warmed.placement_for_batch(geometry, derive_seed(cfg.seed, Stream::Warmup, 1), batch_index)?;
            batch_index += 1;

            let mut tape = Tape::new();
            let xp = tape.leaf(warmed.apply(&x, &placement)?);
            let fwd = model.forward(&mut tape, xp)?;
            let lp = tape.log_softmax(fwd.logits)?;
            let loss = tape.soft_cross_entropy(&one_hot(&y, model.classes()), lp)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite {
                    step: batch_index as usize,
                    detail: "prompt warm-up loss".into(),
                });
            }
            let mut grads = tape.backward(loss)?;
            let g = grads.remove(xp).expect("prompted input is a leaf");
            let (g_dsp, g_dap) = warmed.prompt_gradients(&g, &placement)?;
            if cfg.train_dsp {
                warmed.dsp.values.add_scaled(&g_dsp, -cfg.lr)?;
            }
            if cfg.train_dap {
                warmed.dap.values.add_scaled(&g_dap, -cfg.lr)?;
            }
        }
    }
    Ok(warmed)
}
