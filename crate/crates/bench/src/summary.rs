//! Run summaries and consolidated comparison tables.
//!
//! Every number here is recomputable from `metrics.csv` plus the per-batch
//! source-only errors: per-domain means average the batch errors of a
//! segment, the overall mean averages all batch errors, and gains are in
//! percentage points of error.

use std::fmt::Write as _;

use prompt_adapt_core::adapt::MetricsLog;
use serde::{Deserialize, Serialize};

/// A detector trigger within this many batches after a true boundary
/// counts as a hit.
pub const DETECTOR_TOLERANCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub segment: usize,
    pub domain: String,
    pub round: usize,
    pub batches: usize,
    pub mean_error: f64,
    pub source_only_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub batches: usize,
    pub mean_error: f64,
    pub source_only_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub tolerance: usize,
    pub boundaries: usize,
    pub hits: usize,
    pub misses: usize,
    pub triggers: usize,
    pub false_triggers: usize,
    pub hit_rate: f64,
    pub false_per_50_batches: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    pub model_before: String,
    pub model_after: String,
    pub metrics_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seed: u64,
    pub batches: usize,
    pub mean_error: f64,
    pub source_only_mean_error: f64,
    /// Source-only minus method mean error, in percentage points.
    pub gain: f64,
    pub domains: Vec<DomainSummary>,
    pub rounds: Vec<RoundSummary>,
    pub detector: DetectorSummary,
    pub checksums: Checksums,
    pub config: serde_json::Value,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Confusion of the logged shift triggers against the true segment
/// boundaries.
pub fn score_detector(log: &MetricsLog) -> DetectorSummary {
    let rows = &log.rows;
    let boundaries: Vec<usize> = (1..rows.len())
        .filter(|&i| rows[i].domain_truth != rows[i - 1].domain_truth)
        .collect();
    let triggers: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].shift_triggered).collect();
    let near = |t: usize, b: usize| t >= b && t <= b + DETECTOR_TOLERANCE;
    let hits = boundaries.iter().filter(|&&b| triggers.iter().any(|&t| near(t, b))).count();
    let false_triggers = triggers
        .iter()
        .filter(|&&t| !boundaries.iter().any(|&b| near(t, b)))
        .count();
    DetectorSummary {
        tolerance: DETECTOR_TOLERANCE,
        boundaries: boundaries.len(),
        hits,
        misses: boundaries.len() - hits,
        triggers: triggers.len(),
        false_triggers,
        hit_rate: if boundaries.is_empty() { 1.0 } else { hits as f64 / boundaries.len() as f64 },
        false_per_50_batches: false_triggers as f64 * 50.0 / rows.len().max(1) as f64,
    }
}

impl Summary {
    /// `source_only` holds the bare frozen model's error on every batch.
    pub fn build(
        method: String,
        seed: u64,
        log: &MetricsLog,
        source_only: &[f64],
        checksums: Checksums,
        config: serde_json::Value,
    ) -> Self {
        assert_eq!(log.rows.len(), source_only.len(), "one baseline error per batch");
        let mut domains: Vec<DomainSummary> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, r) in log.rows.iter().enumerate() {
            if domains.last().map(|d| d.segment) != Some(r.domain_truth) {
                let domain = if r.corruption == "clean" {
                    "clean".to_string()
                } else {
                    format!("{}@{}", r.corruption, r.severity)
                };
                domains.push(DomainSummary {
                    segment: r.domain_truth,
                    domain,
                    round: r.round,
                    batches: 0,
                    mean_error: 0.0,
                    source_only_error: 0.0,
                });
                members.push(Vec::new());
            }
            members.last_mut().expect("pushed").push(i);
        }
        for (d, idx) in domains.iter_mut().zip(&members) {
            d.batches = idx.len();
            d.mean_error = mean(idx.iter().map(|&i| log.rows[i].batch_error));
            d.source_only_error = mean(idx.iter().map(|&i| source_only[i]));
        }
        let max_round = log.rows.iter().map(|r| r.round).max().unwrap_or(0);
        let rounds = if max_round == 0 {
            Vec::new()
        } else {
            (0..=max_round)
                .map(|round| {
                    let idx: Vec<usize> = (0..log.rows.len()).filter(|&i| log.rows[i].round == round).collect();
                    RoundSummary {
                        round,
                        batches: idx.len(),
                        mean_error: mean(idx.iter().map(|&i| log.rows[i].batch_error)),
                        source_only_error: mean(idx.iter().map(|&i| source_only[i])),
                    }
                })
                .collect()
        };
        let mean_error = log.mean_error();
        let source_only_mean_error = mean(source_only.iter().copied());
        Self {
            method,
            seed,
            batches: log.rows.len(),
            mean_error,
            source_only_mean_error,
            gain: 100.0 * (source_only_mean_error - mean_error),
            domains,
            rounds,
            detector: score_detector(log),
            checksums,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Human-readable report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method: {}   seed: {}   batches: {}", self.method, self.seed, self.batches);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<4} {:<22} {:>5} {:>8} {:>12} {:>9}", "seg", "domain", "round", "batches", "source-only%", "method%");
        for d in &self.domains {
            let _ = writeln!(
                out,
                "{:<4} {:<22} {:>5} {:>8} {:>12.2} {:>9.2}",
                d.segment,
                d.domain,
                d.round + 1,
                d.batches,
                100.0 * d.source_only_error,
                100.0 * d.mean_error
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "mean error: {:.2}%   source-only: {:.2}%   gain: {:+.2} pp",
            100.0 * self.mean_error,
            100.0 * self.source_only_mean_error,
            self.gain
        );
        if !self.rounds.is_empty() {
            let _ = writeln!(out);
            for r in &self.rounds {
                let _ = writeln!(
                    out,
                    "round {}: mean error {:.2}%   source-only {:.2}%",
                    r.round + 1,
                    100.0 * r.mean_error,
                    100.0 * r.source_only_error
                );
            }
        }
        let d = &self.detector;
        let _ = writeln!(out);
        let _ = writeln!(out, "shift detector (hit = trigger within {} batches of a boundary):", d.tolerance);
        let _ = writeln!(out, "  boundaries {}  hits {}  misses {}", d.boundaries, d.hits, d.misses);
        let _ = writeln!(
            out,
            "  triggers {}  false {}  false per 50 batches {:.2}",
            d.triggers, d.false_triggers, d.false_per_50_batches
        );
        out
    }
}

/// One row of a consolidated comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub run: String,
    /// Per-domain mean errors, in percent.
    pub domain_errors: Vec<f64>,
    pub mean_error: f64,
    /// Source-only minus this row's mean error, in percentage points.
    pub gain: f64,
}

/// Source-only row first, then one row per run, all against the domain
/// columns of the first run.
pub fn compare(runs: &[(String, Summary)]) -> Result<(Vec<String>, Vec<ComparisonRow>), String> {
    let (_, first) = runs.first().ok_or("no runs to compare")?;
    let columns: Vec<String> = first.domains.iter().map(|d| d.domain.clone()).collect();
    let source = 100.0 * first.source_only_mean_error;
    let mut rows = vec![ComparisonRow {
        method: "source-only".into(),
        run: String::new(),
        domain_errors: first.domains.iter().map(|d| 100.0 * d.source_only_error).collect(),
        mean_error: source,
        gain: 0.0,
    }];
    for (name, s) in runs {
        let cols: Vec<&str> = s.domains.iter().map(|d| d.domain.as_str()).collect();
        if cols != columns.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(format!("run {name} has a different domain sequence"));
        }
        let mean_error = 100.0 * s.mean_error;
        rows.push(ComparisonRow {
            method: s.method.clone(),
            run: name.clone(),
            domain_errors: s.domains.iter().map(|d| 100.0 * d.mean_error).collect(),
            mean_error,
            gain: source - mean_error,
        });
    }
    Ok((columns, rows))
}

pub fn comparison_csv(columns: &[String], rows: &[ComparisonRow]) -> String {
    let mut out = String::from("method,run");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push_str(",mean,gain\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.method, r.run);
        for e in &r.domain_errors {
            let _ = write!(out, ",{e:.4}");
        }
        let _ = writeln!(out, ",{:.4},{:.4}", r.mean_error, r.gain);
    }
    out
}

pub fn comparison_text(columns: &[String], rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<20}", "method");
    for c in columns {
        let _ = write!(out, " {:>8}", short(c));
    }
    let _ = writeln!(out, " {:>8} {:>8}", "Mean", "Gain");
    for r in rows {
        let _ = write!(out, "{:<20}", r.method);
        for e in &r.domain_errors {
            let _ = write!(out, " {e:>8.1}");
        }
        let _ = writeln!(out, " {:>8.2} {:>+8.2}", r.mean_error, r.gain);
    }
    out
}

fn short(domain: &str) -> String {
    let name: String = domain.split(['_', '@']).next().unwrap_or(domain).chars().take(8).collect();
    name
}
