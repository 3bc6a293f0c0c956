use std::fs;
use std::path::{Path, PathBuf};

use prompt_adapt_core::adapt::{run_stream, source_only_errors, AdaptState, MetricsLog};
use prompt_adapt_core::checkpoint::Checkpoint;
use prompt_adapt_core::classifier::Classifier;
use prompt_adapt_core::data::{build_stream, source_split, GlyphDataset, GLYPH_GEOMETRY};
use prompt_adapt_core::prompt::init_prompts;
use prompt_adapt_core::seed::{derive_seed, Stream};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::summary::{compare, comparison_csv, comparison_text, Checksums, Summary};

pub const TRAIN_FILE: &str = "source_train.data";
pub const TEST_FILE: &str = "source_test.data";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.txt";
/// Wall-clock metadata lives here so the other outputs stay byte-stable.
pub const META_FILE: &str = "run_meta.json";

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_meta(dir: &Path, command: &str) -> Result<(), CliError> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "finished_unix_seconds": secs,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write(&dir.join(META_FILE), &format!("{meta:#}\n"))
}

#[derive(Debug, Clone)]
pub struct GenDataOutcome {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub train_digest: String,
    pub test_digest: String,
}

/// Writes the clean source train and test sets.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataOutcome, CliError> {
    let dir = cfg.artifacts_dir();
    create_dir(dir)?;
    let d = &cfg.data;
    let (train, test) = source_split(d.train, d.test, d.classes, d.seed)?;
    let mut digests = Vec::new();
    let mut paths = Vec::new();
    for (set, name) in [(&train, TRAIN_FILE), (&test, TEST_FILE)] {
        let ckpt = set.to_checkpoint();
        let path = dir.join(name);
        ckpt.write(&path).map_err(prompt_adapt_core::Error::from)?;
        digests.push(ckpt.digest());
        paths.push(path);
    }
    Ok(GenDataOutcome {
        test_path: paths.pop().expect("two paths"),
        train_path: paths.pop().expect("two paths"),
        test_digest: digests.pop().expect("two digests"),
        train_digest: digests.pop().expect("two digests"),
    })
}

fn load_dataset(cfg: &RunConfig, name: &str) -> Result<GlyphDataset, CliError> {
    let path = cfg.artifacts_dir().join(name);
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "{} not found (run gen-data first)",
            path.display()
        )));
    }
    let unreadable = |e: &dyn std::fmt::Display| CliError::MissingArtifact(format!("unreadable {}: {e}", path.display()));
    let ckpt = Checkpoint::read(&path).map_err(|e| unreadable(&e))?;
    let set = GlyphDataset::from_checkpoint(&ckpt).map_err(|e| unreadable(&e))?;
    let (want, index) = if name == TRAIN_FILE { (cfg.data.train, 0) } else { (cfg.data.test, 1) };
    let seed = derive_seed(cfg.data.seed, Stream::Split, index);
    if set.classes != cfg.data.classes || set.seed != seed || set.len() != want {
        return Err(CliError::Config(format!(
            "{} holds {} images of {} classes, config asks for {} of {} from data seed {} (rerun gen-data)",
            path.display(),
            set.len(),
            set.classes,
            want,
            cfg.data.classes,
            cfg.data.seed
        )));
    }
    Ok(set)
}

fn load_model(cfg: &RunConfig) -> Result<Classifier, CliError> {
    let path = cfg.artifacts_dir().join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "{} not found (run train-source first)",
            path.display()
        )));
    }
    let model = Classifier::load(&path)
        .map_err(|e| CliError::MissingArtifact(format!("unreadable {}: {e}", path.display())))?;
    if model.classes() != cfg.data.classes {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, config asks for {}",
            model.classes(),
            cfg.data.classes
        )));
    }
    if !model.is_frozen() {
        return Err(CliError::MissingArtifact(format!("{} is not a frozen classifier", path.display())));
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub clean_accuracy: f64,
    pub checksum: String,
}

pub fn train_source(cfg: &RunConfig, force: bool) -> Result<TrainOutcome, CliError> {
    let path = cfg.artifacts_dir().join(CHECKPOINT_FILE);
    if path.exists() && !force {
        return Err(CliError::Exists(path));
    }
    let train = load_dataset(cfg, TRAIN_FILE)?;
    let test = load_dataset(cfg, TEST_FILE)?;
    let mut model = Classifier::build_default(train.classes, GLYPH_GEOMETRY, cfg.train.seed)?;
    let losses = model.train_source(&train.images, &train.labels, &cfg.train_config())?;
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(CliError::Numeric(format!("source training diverged: epoch losses {losses:?}")));
    }
    model.freeze();
    let clean_accuracy = 1.0 - model.predict_chunked(&test.images, 100)?.error_rate(&test.labels);
    model.save(&path)?;
    Ok(TrainOutcome {
        checkpoint: path,
        losses,
        clean_accuracy,
        checksum: model.checksum(),
    })
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub dir: PathBuf,
    pub log: MetricsLog,
    pub source_only: Vec<f64>,
    pub summary: Summary,
}

/// Warms prompts on the source set, adapts over the configured stream and
/// writes metrics, summary and report into `dir`.
pub fn adapt_into(cfg: &RunConfig, dir: &Path) -> Result<AdaptOutcome, CliError> {
    let model = load_model(cfg)?;
    let train = load_dataset(cfg, TRAIN_FILE)?;
    let test = load_dataset(cfg, TEST_FILE)?;
    let adapt_cfg = cfg.adapt_config();
    let schedule = cfg.schedule()?;
    let before = model.checksum();

    let stream = build_stream(&test.images, &test.labels, &schedule, adapt_cfg.batch_size, cfg.seed)?;
    let source_only = source_only_errors(&model, &stream)?;

    let zero = adapt_cfg.prompts(&model)?;
    let warm = cfg.warmup_config();
    let prompts = if warm.epochs > 0 && (warm.train_dsp || warm.train_dap) {
        init_prompts(&zero, &train.images, &train.labels, &model, &warm)?
    } else {
        zero
    };
    if !prompts.dsp.values.data().iter().chain(prompts.dap.values.data()).all(|v| v.is_finite()) {
        return Err(CliError::Numeric("prompt warm-up produced non-finite values".into()));
    }
    let mut state = AdaptState::new(prompts, adapt_cfg)?;
    let log = run_stream(&mut state, &model, &stream)?;

    let after = model.checksum();
    if after != before {
        return Err(CliError::Numeric(format!("classifier changed during adaptation: {before} -> {after}")));
    }

    create_dir(dir)?;
    let csv = log.to_csv();
    let summary = Summary::build(
        cfg.method(),
        cfg.seed,
        &log,
        &source_only,
        Checksums {
            model_before: before,
            model_after: after,
            metrics_csv: sha256_hex(csv.as_bytes()),
        },
        cfg.echo(),
    );
    write(&dir.join(METRICS_FILE), &csv)?;
    write(&dir.join(SUMMARY_FILE), &summary.to_json())?;
    write(&dir.join(REPORT_FILE), &summary.render())?;
    write_meta(dir, "adapt")?;
    Ok(AdaptOutcome {
        dir: dir.to_path_buf(),
        log,
        source_only,
        summary,
    })
}

pub fn adapt(cfg: &RunConfig) -> Result<AdaptOutcome, CliError> {
    adapt_into(cfg, &cfg.output_dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub value: serde_json::Value,
    pub mean_error: f64,
    pub source_only_mean_error: f64,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// One adaptation run per grid value, each in its own sub-directory, plus a
/// `sweep.csv` with one row per point.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepPoint>, CliError> {
    let section = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs a `sweep` section".into()))?;
    let axis = section.axis.name();
    let root = cfg.output_dir.join("sweep");
    let mut points = Vec::new();
    for value in &section.values {
        let (point_cfg, label) = cfg.with_sweep_value(section.axis, value)?;
        let out = adapt_into(&point_cfg, &root.join(format!("{axis}-{label}")))?;
        points.push(SweepPoint {
            label,
            value: value.clone(),
            mean_error: out.summary.mean_error,
            source_only_mean_error: out.summary.source_only_mean_error,
        });
    }
    let mut csv = String::from("axis,value,mean_error,source_only_error,gain\n");
    for p in &points {
        csv.push_str(&format!(
            "{axis},{},{:.6},{:.6},{:.4}\n",
            p.label,
            100.0 * p.mean_error,
            100.0 * p.source_only_mean_error,
            100.0 * (p.source_only_mean_error - p.mean_error)
        ));
    }
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join(SWEEP_FILE), &csv)?;
    Ok(points)
}

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";

/// Merges the summaries of finished runs into one comparison table.
pub fn report(cfg: &RunConfig) -> Result<String, CliError> {
    let section = cfg
        .report
        .as_ref()
        .ok_or_else(|| CliError::Config("report needs a `report` section".into()))?;
    let mut runs = Vec::new();
    for dir in &section.runs {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
        let summary: Summary = serde_json::from_str(&text)
            .map_err(|e| CliError::MissingArtifact(format!("malformed {}: {e}", path.display())))?;
        runs.push((dir.display().to_string(), summary));
    }
    let (columns, rows) = compare(&runs).map_err(CliError::MissingArtifact)?;
    let text = comparison_text(&columns, &rows);
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join(COMPARISON_CSV), &comparison_csv(&columns, &rows))?;
    write(&cfg.output_dir.join(COMPARISON_TXT), &text)?;
    Ok(text)
}
