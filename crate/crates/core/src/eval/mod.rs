//! Benchmark harness: cyclic multiple-choice accuracy, retrieval metrics,
//! throughput, and report files.

mod dataset;
mod metrics;
mod runner;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

pub use dataset::{
    letter, letter_index, load_dataset, parse_dataset, to_jsonl, BenchmarkSample, Category, DatasetEntry, DatasetError,
    Split,
};
pub use metrics::{
    cyclic_permutations, mean, mg, miou, ml, parse_choice, recall_at_k, rotated_position, uncertainty, TooFewOptions,
};
pub use runner::{
    sample_accuracy, Dc2Runner, McPrompt, PlainRunner, RotationRecord, Runner, RunnerError, RunnerReply, SampleOutcome,
    ANSWER_INSTRUCTION,
};

use crate::backend::CallCounter;
use crate::raster::load_image;

pub const REPORT_SCHEMA: &str = "dc2-report/1";
pub const RECALL_K: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Samples evaluated at once.
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { concurrency: 1 }
    }
}

/// One CSV row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub category: Option<String>,
    pub accuracy: f64,
    pub correct: usize,
    pub rotations: usize,
    pub failed: bool,
    pub error: Option<String>,
    pub uncertainty: Option<f64>,
    pub recall_at_2: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub runner: String,
    /// The fully resolved configuration of the run.
    pub config: serde_json::Value,
    pub samples: usize,
    pub failed: usize,
    /// Mean of per-sample cyclic accuracies.
    pub overall_acc: f64,
    pub fsp_acc: Option<f64>,
    pub fcp_acc: Option<f64>,
    /// Mean of the FSP and FCP accuracies.
    pub split_average: Option<f64>,
    pub per_category: BTreeMap<String, f64>,
    pub throughput_spm: f64,
    pub elapsed_secs: f64,
    pub mean_uncertainty: Option<f64>,
    pub recall_at_2: Option<f64>,
    pub miou: Option<f64>,
    #[serde(skip)]
    pub rows: Vec<SampleRow>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.display().to_string(), source }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), ReportError> {
        fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn evaluate_entry(entry: &DatasetEntry, runner: &dyn Runner) -> SampleRow {
    let failed = |id: String, category: Option<Category>, error: String| SampleRow {
        id,
        category: category.map(|c| c.to_string()),
        accuracy: 0.0,
        correct: 0,
        rotations: 0,
        failed: true,
        error: Some(error),
        uncertainty: None,
        recall_at_2: None,
        iou: None,
    };
    let sample = match entry {
        DatasetEntry::Sample(s) => s,
        DatasetEntry::Invalid { line, reason, .. } => {
            warn!(id = %entry.id(), line, %reason, "skipping unreadable sample");
            return failed(entry.id(), None, reason.clone());
        }
    };
    let image = if runner.needs_image() {
        match load_image(&sample.image) {
            Ok(img) => Some(img),
            Err(e) => {
                let reason = format!("image {}: {e}", sample.image.display());
                warn!(id = %sample.id, %reason, "skipping unreadable sample");
                return failed(sample.id.clone(), Some(sample.category), reason);
            }
        }
    } else {
        None
    };
    let outcome = sample_accuracy(sample, image.as_ref(), runner);
    let hit_names: Option<Vec<String>> = outcome.hits.as_ref().map(|h| h.iter().map(|h| h.name.clone()).collect());
    let recall = match (&hit_names, &sample.target_objects) {
        (Some(names), Some(targets)) => Some(recall_at_k(names, targets, RECALL_K)),
        _ => None,
    };
    let iou = match (&outcome.hits, &sample.target_bbox) {
        (Some(hits), Some(gt)) => Some(miou(&hits.iter().map(|h| h.region).collect::<Vec<_>>(), gt)),
        _ => None,
    };
    let errors: Vec<&str> = outcome.rotations.iter().filter_map(|r| r.error.as_deref()).collect();
    SampleRow {
        id: sample.id.clone(),
        category: Some(sample.category.to_string()),
        accuracy: outcome.accuracy,
        correct: outcome.rotations.iter().filter(|r| r.correct).count(),
        rotations: outcome.rotations.len(),
        // a sample counts as failed only when no rotation got an answer
        failed: errors.len() == outcome.rotations.len(),
        error: (!errors.is_empty()).then(|| errors.join("; ")),
        uncertainty: outcome.mean_uncertainty(),
        recall_at_2: recall,
        iou,
    }
}

/// Evaluates every entry and aggregates the report. Rows are ordered by
/// sample id whatever the completion order.
pub fn evaluate(
    entries: &[DatasetEntry],
    runner: &dyn Runner,
    options: EvalOptions,
    config: serde_json::Value,
) -> EvalReport {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(options.concurrency.max(1)).build().expect("thread pool");
    let start = Instant::now();
    let mut rows: Vec<SampleRow> = pool.install(|| entries.par_iter().map(|e| evaluate_entry(e, runner)).collect());
    let elapsed = start.elapsed().as_secs_f64();
    rows.sort_by(|a, b| a.id.cmp(&b.id));

    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let mut by_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut by_split: BTreeMap<Split, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        if let Some(cat) = &row.category {
            by_category.entry(cat.clone()).or_default().push(row.accuracy);
            let split = if cat.starts_with("FSP") { Split::Fsp } else { Split::Fcp };
            by_split.entry(split).or_default().push(row.accuracy);
        }
    }
    let fsp = by_split.get(&Split::Fsp).and_then(|v| mean(v));
    let fcp = by_split.get(&Split::Fcp).and_then(|v| mean(v));
    let completed = rows.iter().filter(|r| !r.failed).count();
    let collect = |f: fn(&SampleRow) -> Option<f64>| rows.iter().filter_map(f).collect::<Vec<_>>();

    let report = EvalReport {
        schema: REPORT_SCHEMA.into(),
        runner: runner.name().into(),
        config,
        samples: rows.len(),
        failed: rows.len() - completed,
        overall_acc: mean(&accs).unwrap_or(0.0),
        fsp_acc: fsp,
        fcp_acc: fcp,
        split_average: fsp.zip(fcp).map(|(a, b)| (a + b) / 2.0),
        per_category: by_category.iter().map(|(k, v)| (k.clone(), mean(v).unwrap_or(0.0))).collect(),
        throughput_spm: if elapsed > 0.0 { completed as f64 * 60.0 / elapsed } else { 0.0 },
        elapsed_secs: elapsed,
        mean_uncertainty: mean(&collect(|r| r.uncertainty)),
        recall_at_2: mean(&collect(|r| r.recall_at_2)),
        miou: mean(&collect(|r| r.iou)),
        rows,
    };
    info!(runner = %report.runner, acc = report.overall_acc, spm = report.throughput_spm, "evaluation done");
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub throughput: f64,
    pub accuracy: f64,
    pub backend_calls: u64,
}

/// Runs `evaluate` once per θ. `build` returns the runner for a θ and the
/// counter wrapped around its backend.
pub fn sweep_theta(
    entries: &[DatasetEntry],
    thetas: &[f64],
    options: EvalOptions,
    build: &dyn Fn(f64) -> (Box<dyn Runner>, Arc<CallCounter>),
) -> Vec<SweepPoint> {
    thetas
        .iter()
        .map(|&theta| {
            let (runner, counter) = build(theta);
            counter.reset();
            let report = evaluate(entries, runner.as_ref(), options, serde_json::json!({ "theta": theta }));
            SweepPoint {
                theta,
                throughput: report.throughput_spm,
                accuracy: report.overall_acc,
                backend_calls: counter.calls(),
            }
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["theta", "throughput", "accuracy", "backend_calls"])?;
    for p in points {
        w.write_record([
            p.theta.to_string(),
            format!("{:.4}", p.throughput),
            format!("{:.6}", p.accuracy),
            p.backend_calls.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}
