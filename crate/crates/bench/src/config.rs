//! Run configuration: a single JSON document, validated in full before any
//! compute. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use prompt_adapt_core::adapt::{AdaptConfig, AugmentPolicy};
use prompt_adapt_core::classifier::TrainConfig;
use prompt_adapt_core::data::{Domain, Family, Schedule, GLYPH_GEOMETRY};
use prompt_adapt_core::prompt::{PlacementPolicy, PromptPair, WarmupConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where a command writes its outputs.
    pub output_dir: PathBuf,
    /// Where the datasets and the source checkpoint live; defaults to
    /// `output_dir`.
    pub artifacts_dir: Option<PathBuf>,
    /// Adaptation seed: stream corruption noise, warm-up order, placement
    /// and augmentation draws.
    pub seed: u64,
    pub data: DataSection,
    pub train: TrainSection,
    pub warmup: WarmupSection,
    pub adapt: AdaptSection,
    pub schedule: ScheduleSection,
    pub ablation: AblationSection,
    pub sweep: Option<SweepSection>,
    pub report: Option<ReportSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            artifacts_dir: None,
            seed: 7,
            data: DataSection::default(),
            train: TrainSection::default(),
            warmup: WarmupSection::default(),
            adapt: AdaptSection::default(),
            schedule: ScheduleSection::default(),
            ablation: AblationSection::default(),
            sweep: None,
            report: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 5000,
            test: 1000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch_size: d.batch_size,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupSection {
    pub epochs: usize,
    /// Defaults to the adaptation learning rate.
    pub lr: Option<f64>,
    pub batch_size: usize,
}

impl Default for WarmupSection {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: None,
            batch_size: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PlacementSpec {
    Random,
    Fixed { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentSpec {
    Identity,
    FlipShiftNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub lr: f64,
    pub ema_momentum: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub xi: f64,
    pub batch_size: usize,
    pub augment: AugmentSpec,
    pub placement: PlacementSpec,
    pub dsp_size: [usize; 2],
    pub dap_size: [usize; 2],
    pub offset: isize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Self {
            lr: d.lr,
            ema_momentum: d.ema_momentum,
            alpha: d.alpha,
            threshold: d.threshold,
            xi: d.xi,
            batch_size: d.batch_size,
            augment: match d.augment {
                AugmentPolicy::Identity => AugmentSpec::Identity,
                AugmentPolicy::FlipShiftNoise => AugmentSpec::FlipShiftNoise,
            },
            placement: match d.placement {
                PlacementPolicy::RandomPerBatch => PlacementSpec::Random,
                PlacementPolicy::Fixed { row, col } => PlacementSpec::Fixed { row, col },
            },
            dsp_size: [d.dsp_size.0, d.dsp_size.1],
            dap_size: [d.dap_size.0, d.dap_size.1],
            offset: d.offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// A corruption family name, or `"clean"`.
    pub family: String,
    #[serde(default)]
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSection {
    Standard { families: Vec<String>, severity: u8 },
    Gradual { families: Vec<String> },
    Rounds { domains: Vec<DomainSpec>, rounds: usize },
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection::Standard {
            families: Family::ALL.iter().map(|f| f.name().to_string()).collect(),
            severity: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub disable_dsp: bool,
    pub disable_dap: bool,
    pub alpha_zero: bool,
    pub signed_delta_conf: bool,
    pub nonneg_eta: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PromptSize,
    Placement,
    RelativeOffset,
    Alpha,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PromptSize => "prompt_size",
            SweepAxis::Placement => "placement",
            SweepAxis::RelativeOffset => "relative_offset",
            SweepAxis::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    /// Sizes and offsets are integers, alphas numbers, placements either
    /// `"random"` or `{"fixed": {"row": r, "col": c}}`.
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub runs: Vec<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn family(name: &str) -> Result<Family, CliError> {
    name.parse().map_err(|e: prompt_adapt_core::Error| config_err(e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn artifacts_dir(&self) -> &Path {
        self.artifacts_dir.as_deref().unwrap_or(&self.output_dir)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        if !(2..=prompt_adapt_core::data::glyphs::MAX_CLASSES).contains(&d.classes) {
            return Err(config_err(format!("data.classes must lie in 2..=10, got {}", d.classes)));
        }
        if d.train < d.classes || d.test < d.classes {
            return Err(config_err("data.train and data.test need at least one image per class"));
        }
        self.train_config().validate().map_err(|e| config_err(e.to_string()))?;
        self.adapt_config().validate().map_err(|e| config_err(e.to_string()))?;
        if self.warmup.batch_size == 0 {
            return Err(config_err("warmup.batch_size must be >= 1"));
        }
        if let Some(lr) = self.warmup.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(config_err(format!("warmup.lr must be >= 0, got {lr}")));
            }
        }
        let a = &self.adapt;
        let placement = self.adapt_config().placement;
        PromptPair::zeros(
            GLYPH_GEOMETRY,
            (a.dsp_size[0], a.dsp_size[1]),
            (a.dap_size[0], a.dap_size[1]),
            placement,
            a.offset,
        )
        .map_err(|e| config_err(e.to_string()))?;
        self.schedule()?.segments().map_err(|e| config_err(e.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(config_err("sweep.values is empty"));
            }
            for v in &s.values {
                self.with_sweep_value(s.axis, v)?;
            }
        }
        if let Some(r) = &self.report {
            if r.runs.is_empty() {
                return Err(config_err("report.runs is empty"));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let a = &self.adapt;
        let ab = &self.ablation;
        AdaptConfig {
            lr: a.lr,
            ema_momentum: a.ema_momentum,
            alpha: if ab.alpha_zero { 0.0 } else { a.alpha },
            threshold: a.threshold,
            xi: a.xi,
            batch_size: a.batch_size,
            augment: match a.augment {
                AugmentSpec::Identity => AugmentPolicy::Identity,
                AugmentSpec::FlipShiftNoise => AugmentPolicy::FlipShiftNoise,
            },
            placement: match a.placement {
                PlacementSpec::Random => PlacementPolicy::RandomPerBatch,
                PlacementSpec::Fixed { row, col } => PlacementPolicy::Fixed { row, col },
            },
            dsp_size: (a.dsp_size[0], a.dsp_size[1]),
            dap_size: (a.dap_size[0], a.dap_size[1]),
            offset: a.offset,
            seed: self.seed,
            update_dsp: !ab.disable_dsp,
            update_dap: !ab.disable_dap,
            signed_delta: ab.signed_delta_conf,
            nonneg_eta: ab.nonneg_eta,
        }
    }

    pub fn warmup_config(&self) -> WarmupConfig {
        WarmupConfig {
            epochs: self.warmup.epochs,
            lr: self.warmup.lr.unwrap_or(self.adapt.lr),
            batch_size: self.warmup.batch_size,
            seed: self.seed,
            train_dsp: !self.ablation.disable_dsp,
            train_dap: !self.ablation.disable_dap,
        }
    }

    pub fn schedule(&self) -> Result<Schedule, CliError> {
        let families = |names: &[String]| names.iter().map(|n| family(n)).collect::<Result<Vec<_>, _>>();
        Ok(match &self.schedule {
            ScheduleSection::Standard { families: f, severity } => Schedule::Standard {
                families: families(f)?,
                severity: *severity,
            },
            ScheduleSection::Gradual { families: f } => Schedule::Gradual { families: families(f)? },
            ScheduleSection::Rounds { domains, rounds } => Schedule::Rounds {
                domains: domains
                    .iter()
                    .map(|d| {
                        if d.family == "clean" {
                            Ok(Domain::CLEAN)
                        } else {
                            Ok(Domain::new(family(&d.family)?, d.severity))
                        }
                    })
                    .collect::<Result<_, CliError>>()?,
                rounds: *rounds,
            },
        })
    }

    /// Method label derived from the ablation flags.
    pub fn method(&self) -> String {
        let ab = &self.ablation;
        let base = match (ab.disable_dsp, ab.disable_dap) {
            (false, false) => "dsp+dap",
            (false, true) => "dsp-only",
            (true, false) => "dap-only",
            (true, true) => "no-prompt",
        };
        if ab.alpha_zero && !ab.disable_dap {
            format!("{base} alpha=0")
        } else {
            base.to_string()
        }
    }

    /// A copy with one sweep axis set to `value`, and a file-name-safe label.
    pub fn with_sweep_value(&self, axis: SweepAxis, value: &serde_json::Value) -> Result<(RunConfig, String), CliError> {
        let bad = || config_err(format!("invalid {} sweep value {value}", axis.name()));
        let mut cfg = self.clone();
        let label = match axis {
            SweepAxis::PromptSize => {
                let n = value.as_u64().ok_or_else(bad)? as usize;
                cfg.adapt.dsp_size = [n, n];
                cfg.adapt.dap_size = [n, n];
                n.to_string()
            }
            SweepAxis::RelativeOffset => {
                let n = value.as_i64().ok_or_else(bad)? as isize;
                cfg.adapt.offset = n;
                n.to_string()
            }
            SweepAxis::Alpha => {
                let a = value.as_f64().ok_or_else(bad)?;
                cfg.adapt.alpha = a;
                a.to_string()
            }
            SweepAxis::Placement => {
                let p: PlacementSpec = serde_json::from_value(value.clone()).map_err(|_| bad())?;
                cfg.adapt.placement = p;
                match p {
                    PlacementSpec::Random => "random".to_string(),
                    PlacementSpec::Fixed { row, col } => format!("fixed-{row}-{col}"),
                }
            }
        };
        cfg.sweep = None;
        let a = &cfg.adapt;
        PromptPair::zeros(
            GLYPH_GEOMETRY,
            (a.dsp_size[0], a.dsp_size[1]),
            (a.dap_size[0], a.dap_size[1]),
            cfg.adapt_config().placement,
            a.offset,
        )
        .map_err(|e| config_err(e.to_string()))?;
        cfg.adapt_config().validate().map_err(|e| config_err(e.to_string()))?;
        Ok((cfg, label))
    }

    /// The configuration as echoed into reports: everything that affects
    /// results, without local paths.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for key in ["output_dir", "artifacts_dir", "sweep", "report"] {
                map.remove(key);
            }
        }
        v
    }
}
