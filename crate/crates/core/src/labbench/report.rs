// SPDX-License-Identifier: MIT OR Apache-2.0

//! Matrix results on disk.
//!
//! `results.jsonl` holds a header line, one `cell` line per (combination,
//! seed) and one `aggregate` line per combination. `plot.csv` has the columns
//! `combo,mean_strict,mean_forced,seed_count`; a combination whose every seed
//! failed shows `failed` in both mean columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Outcome of one (combination, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub combo: String,
    pub seed: u64,
    pub status: CellStatus,
    /// Lie-detection accuracy, full-vocabulary argmax.
    pub strict: Option<f64>,
    /// Lie-detection accuracy, Yes versus No only.
    pub forced: Option<f64>,
    /// Share of lie-eval answers whose argmax is Yes or No.
    pub answer_rate: Option<f64>,
    /// Forced-choice accuracy on the held-out part of the training datasets.
    pub heldout_forced: Option<f64>,
    pub steps: usize,
    pub final_loss: Option<f32>,
    pub wall_clock_s: f64,
    pub error: Option<String>,
}

impl CellRecord {
    pub fn failed(combo: String, seed: u64, error: String, wall_clock_s: f64) -> Self {
        Self {
            combo,
            seed,
            status: CellStatus::Failed,
            strict: None,
            forced: None,
            answer_rate: None,
            heldout_forced: None,
            steps: 0,
            final_loss: None,
            wall_clock_s,
            error: Some(error),
        }
    }
}

/// Per-combination means over the seeds that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub combo: String,
    pub seed_count: usize,
    pub failed: usize,
    pub mean_strict: Option<f64>,
    pub mean_forced: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub records: Vec<CellRecord>,
    pub summaries: Vec<CellSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Summaries in order of first appearance of each combination.
pub fn aggregate(records: &[CellRecord]) -> Vec<CellSummary> {
    let mut combos: Vec<&str> = Vec::new();
    for r in records {
        if !combos.contains(&r.combo.as_str()) {
            combos.push(&r.combo);
        }
    }
    combos
        .into_iter()
        .map(|c| {
            let ok: Vec<&CellRecord> = records
                .iter()
                .filter(|r| r.combo == c && r.status == CellStatus::Ok)
                .collect();
            CellSummary {
                combo: c.to_string(),
                seed_count: ok.len(),
                failed: records
                    .iter()
                    .filter(|r| r.combo == c && r.status == CellStatus::Failed)
                    .count(),
                mean_strict: mean(ok.iter().filter_map(|r| r.strict)),
                mean_forced: mean(ok.iter().filter_map(|r| r.forced)),
            }
        })
        .collect()
}

impl EvalReport {
    pub fn new(label: impl Into<String>, records: Vec<CellRecord>) -> Self {
        let summaries = aggregate(&records);
        Self {
            label: label.into(),
            records,
            summaries,
        }
    }

    pub fn summary(&self, combo: &str) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.combo == combo)
    }

    pub fn failed_cells(&self) -> usize {
        self.records.iter().filter(|r| r.status == CellStatus::Failed).count()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header { label: String },
    Cell(CellRecord),
    Aggregate(CellSummary),
}

pub fn results_path(dir: &Path) -> PathBuf {
    dir.join("results.jsonl")
}

pub fn plot_path(dir: &Path) -> PathBuf {
    dir.join("plot.csv")
}

fn fmt_mean(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_string(), |x| format!("{x:.6}"))
}

/// The plot table as CSV text.
pub fn plot_table(report: &EvalReport) -> String {
    let mut out = String::from("combo,mean_strict,mean_forced,seed_count\n");
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.combo,
            fmt_mean(s.mean_strict),
            fmt_mean(s.mean_forced),
            s.seed_count
        );
    }
    out
}

/// Writes `results.jsonl` and `plot.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    let header = Line::Header {
        label: report.label.clone(),
    };
    let all = std::iter::once(header)
        .chain(report.records.iter().cloned().map(Line::Cell))
        .chain(report.summaries.iter().cloned().map(Line::Aggregate));
    for line in all {
        lines.push_str(&serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
        lines.push('\n');
    }
    let results = results_path(dir);
    std::fs::write(&results, lines).map_err(|e| Error::io(&results, e))?;
    let plot = plot_path(dir);
    std::fs::write(&plot, plot_table(report)).map_err(|e| Error::io(&plot, e))?;
    Ok(vec![results, plot])
}

/// Parses a `results.jsonl` written by [`write_report`].
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let path = results_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut label = None;
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match parsed {
            Line::Header { label: l } => label = Some(l),
            Line::Cell(c) => records.push(c),
            Line::Aggregate(s) => summaries.push(s),
        }
    }
    let label = label.ok_or_else(|| Error::Format(format!("{}: missing header", path.display())))?;
    Ok(EvalReport {
        label,
        records,
        summaries,
    })
}
