//! On-disk run artifacts.
//!
//! Each policy run writes `rounds.csv`, `clients.csv` and `run.json` into its
//! own directory; a suite writes `summary.json` next to those directories.

use std::fs;
use std::path::Path;

use feddq_core::federation::RoundReport;
use feddq_core::numerics::{BatchSize, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const CLIENTS_FILE: &str = "clients.csv";
pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub const ROUND_COLUMNS: [&str; 14] = [
    "round",
    "policy",
    "avg_bits",
    "min_bits",
    "max_bits",
    "mean_range",
    "paper_bits_round",
    "wire_bits_round",
    "paper_bits_cum",
    "wire_bits_cum",
    "avg_train_loss",
    "eval_loss",
    "eval_accuracy",
    "grad_norm_sq",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub policy: String,
    pub avg_bits: f64,
    pub min_bits: u8,
    pub max_bits: u8,
    pub mean_range: f64,
    pub paper_bits_round: u64,
    pub wire_bits_round: u64,
    pub paper_bits_cum: u64,
    pub wire_bits_cum: u64,
    pub avg_train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub grad_norm_sq: Option<f64>,
}

impl RoundRow {
    pub fn from_report(policy: &str, r: &RoundReport) -> Self {
        Self {
            round: r.round,
            policy: policy.to_owned(),
            avg_bits: r.avg_bits(),
            min_bits: r.bits().min().unwrap_or(0),
            max_bits: r.bits().max().unwrap_or(0),
            mean_range: r.mean_range(),
            paper_bits_round: r.paper_bits_round,
            wire_bits_round: r.wire_bits_round,
            paper_bits_cum: r.cumulative_paper_bits,
            wire_bits_cum: r.cumulative_wire_bits,
            avg_train_loss: r.avg_train_loss,
            eval_loss: r.eval_loss,
            eval_accuracy: r.eval_accuracy,
            grad_norm_sq: r.grad_norm_sq,
        }
    }
}

/// One row per selected client per round. `bits` is 64 for raw uploads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub round: usize,
    pub client_id: usize,
    pub weight: f64,
    pub range: f64,
    pub bits: u8,
    pub levels: Option<u64>,
    pub paper_bits: u64,
    pub wire_bits: u64,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Run parameters needed to evaluate bounds after the fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub policy: String,
    pub model: ModelSpec,
    pub d: usize,
    pub n_clients: usize,
    pub r_selected: usize,
    pub rounds_planned: usize,
    pub rounds_run: usize,
    pub eta: f64,
    pub tau: usize,
    pub batch_size: BatchSize,
    pub seed: u64,
    pub verification: bool,
    /// False when the run stopped early.
    pub complete: bool,
    /// Global training loss at the initial model (verification runs).
    pub f0: Option<f64>,
    /// Global training loss at the final model (verification runs).
    pub fk: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub rounds_run: usize,
    pub complete: bool,
    pub final_train_loss: Option<f64>,
    /// Eval accuracy for classifiers, eval loss otherwise.
    pub final_eval_metric: Option<f64>,
    pub paper_bits_total: u64,
    pub wire_bits_total: u64,
    pub target_value: Option<f64>,
    pub bits_to_target: Option<u64>,
    pub rounds_to_target: Option<usize>,
}

impl PolicySummary {
    pub fn from_rows(policy: &str, rows: &[RoundRow], complete: bool, target: Option<f64>) -> Self {
        let last = rows.last();
        let hit = target.and_then(|t| rows.iter().find(|r| r.avg_train_loss <= t));
        Self {
            policy: policy.to_owned(),
            rounds_run: rows.len(),
            complete,
            final_train_loss: last.map(|r| r.avg_train_loss),
            final_eval_metric: last.map(|r| r.eval_accuracy.unwrap_or(r.eval_loss)),
            paper_bits_total: last.map_or(0, |r| r.paper_bits_cum),
            wire_bits_total: last.map_or(0, |r| r.wire_bits_cum),
            target_value: target,
            bits_to_target: hit.map(|r| r.paper_bits_cum),
            rounds_to_target: hit.map(|r| r.round + 1),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: Option<&[&str]>) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(header.is_none())
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| io_err(path, e))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_rounds(path: &Path, rows: &[RoundRow]) -> Result<(), CliError> {
    // explicit header so an empty run still has the schema
    write_csv(path, rows, Some(&ROUND_COLUMNS))
}

pub fn write_clients(path: &Path, rows: &[ClientRow]) -> Result<(), CliError> {
    write_csv(path, rows, None)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Input(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let missing: Vec<&str> = ROUND_COLUMNS.iter().copied().filter(|c| !header.iter().any(|h| h == *c)).collect();
    if !missing.is_empty() {
        return Err(CliError::Input(format!("{}: missing columns {}", path.display(), missing.join(", "))));
    }
    read_csv(path)
}

pub fn read_clients(path: &Path) -> Result<Vec<ClientRow>, CliError> {
    read_csv(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn client_rows(reports: &[RoundReport]) -> Vec<ClientRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(move |c| ClientRow {
                round: r.round,
                client_id: c.client_id,
                weight: c.weight,
                range: c.range,
                bits: c.bits,
                levels: c.levels,
                paper_bits: c.paper_bits,
                wire_bits: c.wire_bits,
                loss_before: c.loss_before,
                loss_after: c.loss_after,
            })
        })
        .collect()
}
