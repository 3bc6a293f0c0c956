use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use prompt_adapt::commands::{self, CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE, TEST_FILE, TRAIN_FILE};
use prompt_adapt::summary::Summary;
use prompt_adapt::RunConfig;
use prompt_adapt_core::adapt::MetricsLog;
use prompt_adapt_core::checkpoint::Checkpoint;
use serde_json::json;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prompt-adapt"))
}

/// A small but complete run: 200 training images, 100 test images,
/// batches of 20, two corruption domains.
fn tiny(dir: &Path) -> serde_json::Value {
    json!({
        "output_dir": dir.join("run"),
        "artifacts_dir": dir.join("artifacts"),
        "data": {"classes": 4, "train": 200, "test": 100, "seed": 3},
        "train": {"epochs": 2, "batch_size": 20},
        "warmup": {"epochs": 1, "batch_size": 50},
        "adapt": {"batch_size": 20},
        "schedule": {"kind": "standard", "families": ["fog", "contrast"], "severity": 3}
    })
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn cfg(value: &serde_json::Value) -> RunConfig {
    RunConfig::from_json(&value.to_string()).unwrap()
}

fn status(cmd: &str, config: &Path, force: bool) -> i32 {
    let mut c = bin();
    c.arg(cmd).arg("--config").arg(config);
    if force {
        c.arg("--force");
    }
    c.output().unwrap().status.code().unwrap()
}

fn prepared() -> (TempDir, serde_json::Value) {
    let dir = TempDir::new().unwrap();
    let v = tiny(dir.path());
    let c = cfg(&v);
    commands::gen_data(&c).unwrap();
    commands::train_source(&c, false).unwrap();
    (dir, v)
}

#[test]
fn config_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let unknown = write_config(dir.path(), "a.json", &json!({"sed": 1}));
    assert_eq!(status("gen-data", &unknown, false), 2);
    let one_class = write_config(dir.path(), "b.json", &json!({"data": {"classes": 1}}));
    assert_eq!(status("gen-data", &one_class, false), 2);
    let bad_family = write_config(
        dir.path(),
        "c.json",
        &json!({"schedule": {"kind": "standard", "families": ["snow"], "severity": 3}}),
    );
    assert_eq!(status("adapt", &bad_family, false), 2);
    assert_eq!(status("adapt", &dir.path().join("missing.json"), false), 2);
    let out = bin().arg("adapt").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_3() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.json", &tiny(dir.path()));
    assert_eq!(status("train-source", &config, false), 3);
    assert_eq!(status("adapt", &config, false), 3);
    assert_eq!(status("gen-data", &config, false), 0);
    assert_eq!(status("adapt", &config, false), 3);

    let artifacts = dir.path().join("artifacts");
    fs::write(artifacts.join(CHECKPOINT_FILE), "not a checkpoint\n").unwrap();
    assert_eq!(status("adapt", &config, false), 3);
}

#[test]
fn gen_data_is_idempotent_and_creates_directories() {
    let dir = TempDir::new().unwrap();
    let v = tiny(&dir.path().join("nested/deeper"));
    let config = write_config(dir.path(), "run.json", &v);
    assert_eq!(status("gen-data", &config, false), 0);
    let artifacts = dir.path().join("nested/deeper/artifacts");
    let first = fs::read(artifacts.join(TRAIN_FILE)).unwrap();
    assert_eq!(status("gen-data", &config, false), 0);
    assert_eq!(first, fs::read(artifacts.join(TRAIN_FILE)).unwrap());
    assert!(artifacts.join(TEST_FILE).exists());
}

#[test]
fn train_source_refuses_to_overwrite_without_force() {
    let (dir, v) = prepared();
    let config = write_config(dir.path(), "run.json", &v);
    let ckpt = dir.path().join("artifacts").join(CHECKPOINT_FILE);
    let before = fs::read(&ckpt).unwrap();
    assert_eq!(status("train-source", &config, false), 2);
    assert_eq!(status("train-source", &config, true), 0);
    assert_eq!(before, fs::read(&ckpt).unwrap(), "fixed seed gives identical checkpoint bytes");
}

#[test]
fn mismatched_artifacts_are_a_config_error() {
    let (dir, mut v) = prepared();
    v["data"]["seed"] = json!(4);
    let config = write_config(dir.path(), "run.json", &v);
    assert_eq!(status("adapt", &config, false), 2);
}

#[test]
fn non_finite_loss_exits_with_4() {
    let (dir, v) = prepared();
    let path = dir.path().join("artifacts").join(CHECKPOINT_FILE);
    let original = Checkpoint::read(&path).unwrap();
    let mut poisoned = Checkpoint::new();
    for (k, val) in original.metadata() {
        poisoned.set_meta(k, val);
    }
    for (i, (name, t)) in original.tensors().enumerate() {
        let mut t = t.clone();
        if i == 0 {
            t.data_mut()[0] = f64::NAN;
        }
        poisoned.push_tensor(name, t);
    }
    poisoned.write(&path).unwrap();
    let config = write_config(dir.path(), "run.json", &v);
    assert_eq!(status("adapt", &config, false), 4);
}

#[test]
fn adapt_writes_consistent_outputs() {
    let (dir, v) = prepared();
    let config = write_config(dir.path(), "run.json", &v);
    assert_eq!(status("adapt", &config, false), 0);
    let run = dir.path().join("run");
    for f in [METRICS_FILE, SUMMARY_FILE, "report.txt", "run_meta.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = MetricsLog::from_csv(&fs::read_to_string(run.join(METRICS_FILE)).unwrap()).unwrap();
    let summary: Summary = serde_json::from_str(&fs::read_to_string(run.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(log.rows.len(), 10);
    assert_eq!(summary.domains.len(), 2);
    assert!((summary.mean_error - log.mean_error()).abs() <= 1e-9);
    let weighted: f64 = summary.domains.iter().map(|d| d.mean_error * d.batches as f64).sum::<f64>() / 10.0;
    assert!((weighted - summary.mean_error).abs() <= 1e-12);
    for d in &summary.domains {
        let rows: Vec<_> = log.rows.iter().filter(|r| r.domain_truth == d.segment).collect();
        let mean = rows.iter().map(|r| r.batch_error).sum::<f64>() / rows.len() as f64;
        assert!((mean - d.mean_error).abs() <= 1e-9);
    }
    assert_eq!(summary.checksums.model_before, summary.checksums.model_after);
    assert_eq!(summary.config["seed"], json!(7));
    assert!(summary.config.get("output_dir").is_none());
}

#[test]
fn disabled_prompts_at_zero_lr_equal_the_source_baseline() {
    let (dir, mut v) = prepared();
    v["adapt"]["lr"] = json!(0.0);
    v["ablation"] = json!({"disable_dsp": true, "disable_dap": true});
    let out = commands::adapt(&cfg(&v)).unwrap();
    let errors: Vec<f64> = out.log.rows.iter().map(|r| r.batch_error).collect();
    assert_eq!(errors, out.source_only);
    assert_eq!(out.summary.gain, 0.0);
    assert_eq!(out.summary.method, "no-prompt");
    drop(dir);
}

#[test]
fn rounds_schedule_reports_one_row_per_round() {
    let (_dir, mut v) = prepared();
    v["schedule"] = json!({
        "kind": "rounds",
        "domains": [{"family": "fog", "severity": 5}, {"family": "clean", "severity": 0}],
        "rounds": 3
    });
    let out = commands::adapt(&cfg(&v)).unwrap();
    assert_eq!(out.summary.rounds.len(), 3);
    assert_eq!(out.summary.domains.len(), 6);
    assert!(out.summary.render().contains("round 3"));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let (dir, mut v) = prepared();
    v["schedule"] = json!({"kind": "standard", "families": ["fog"], "severity": 3});
    v["warmup"] = json!({"epochs": 0});
    v["sweep"] = json!({"axis": "relative_offset", "values": [-4, 4, -4]});
    let config = write_config(dir.path(), "sweep.json", &v);
    assert_eq!(status("sweep", &config, false), 0);
    let csv = fs::read_to_string(dir.path().join("run/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("relative_offset,-4,"));
    assert!(lines[2].starts_with("relative_offset,4,"));
    assert_eq!(lines[1], lines[3], "repeated grid point");
    assert!(dir.path().join("run/sweep/relative_offset-4").is_dir());

    v["sweep"] = json!({"axis": "prompt_size", "values": []});
    let empty = write_config(dir.path(), "empty.json", &v);
    assert_eq!(status("sweep", &empty, false), 2);
}

#[test]
fn report_merges_runs() {
    let (dir, mut v) = prepared();
    v["warmup"] = json!({"epochs": 0});
    let a = commands::adapt_into(&cfg(&v), &dir.path().join("a")).unwrap();
    commands::adapt_into(&cfg(&v), &dir.path().join("b")).unwrap();
    v["report"] = json!({"runs": [dir.path().join("a"), dir.path().join("b")]});
    v["output_dir"] = json!(dir.path().join("cmp"));
    let config = write_config(dir.path(), "report.json", &v);
    assert_eq!(status("report", &config, false), 0);
    let csv = fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("method,run,fog@3,contrast@3,mean,gain"));
    assert!(lines[1].starts_with("source-only,,"));
    assert!(lines[1].ends_with(",0.0000"));
    let strip = |l: &str| {
        let mut cells: Vec<&str> = l.split(',').collect();
        cells.remove(1);
        cells.join(",")
    };
    assert_eq!(strip(lines[2]), strip(lines[3]));
    let gain: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
    assert!((gain - a.summary.gain).abs() < 1e-4);

    v["report"] = json!({"runs": [dir.path().join("nowhere")]});
    let broken = write_config(dir.path(), "broken.json", &v);
    assert_eq!(status("report", &broken, false), 3);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
