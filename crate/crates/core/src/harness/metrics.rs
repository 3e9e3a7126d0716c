//! Per-epoch metrics and run summaries, written as newline-delimited JSON.

use std::io::Write;

use serde::{Deserialize, Serialize};

/// Which part of a run produced a record. Only FORGET has a counting phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Count,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean loss over this epoch's training forward passes.
    pub train_loss: f64,
    pub test_top1: f64,
    /// Scheduled maximum hidden fraction `F_e` (0 for non-hiding strategies).
    pub f_e: f64,
    /// Realized hidden fraction `F*`.
    pub f_star: f64,
    pub hidden: usize,
    pub dropped: usize,
    pub moved_back: usize,
    /// Samples hidden both this epoch and the previous one.
    pub hidden_again: usize,
    pub forward_count: usize,
    pub backward_count: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub eta_e: f64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub epochs: usize,
    /// Epochs spent collecting forgetting statistics before pruning.
    pub counting_epochs: usize,
    pub pruned: usize,
    pub best_test_top1: f64,
    pub final_test_top1: f64,
    pub total_forward: u64,
    pub total_backward: u64,
    /// Per-sample gradients actually computed, counted inside the trainer.
    pub gradient_evaluations: u64,
    pub total_steps: u64,
    /// Includes any counting phase.
    pub total_wall_clock_ms: f64,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: &'a RunSummary,
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[MetricsRecord], summary: &RunSummary) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut w, &SummaryLine { summary })?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
    pub summary: Option<RunSummary>,
}

pub fn read_jsonl(text: &str) -> Result<MetricsLog, serde_json::Error> {
    #[derive(Deserialize)]
    struct SummaryOwned {
        summary: RunSummary,
    }
    let mut records = Vec::new();
    let mut summary = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if line.starts_with("{\"summary\"") {
            summary = Some(serde_json::from_str::<SummaryOwned>(line)?.summary);
        } else {
            records.push(serde_json::from_str(line)?);
        }
    }
    Ok(MetricsLog { records, summary })
}

/// Copy of the records with wall-clock fields zeroed, for determinism checks.
pub fn without_wall_clock(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_clock_ms = 0.0;
            r
        })
        .collect()
}
