//! Run reports: the deterministic body, the wall-clock meta block and the
//! one-line CSV summary.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::TargetOutcome;
use crate::error::{Error, Result};
use crate::federated::UtilityPoint;
use crate::metrics::AttackSummary;

/// Crate version plus the git revision seen at build time.
pub fn build_stamp() -> String {
    format!("cia-bench {} ({})", env!("CARGO_PKG_VERSION"), env!("CIA_BENCH_GIT_REV"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaSummary {
    pub rho: f64,
    pub summary: AttackSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AiaSummary {
    /// Mean AIA accuracy over targets, one entry per launch round.
    pub mean_accuracy: Vec<f64>,
    pub max_accuracy: f64,
}

/// Everything a run computed. Two runs with the same config and seeds
/// serialize this to identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    /// The single-cell config that produced this report, runnable as is.
    pub config: serde_json::Value,
    pub label: CellLabel,
    pub dataset: DatasetStats,
    pub complete: bool,
    pub incomplete_reason: Option<String>,
    pub rounds_completed: usize,
    pub messages: u64,
    pub adversary_observations: u64,
    /// Rounds at which accuracies were recorded.
    pub checkpoints: Vec<usize>,
    pub cia: Option<AttackSummary>,
    pub mia: Vec<MiaSummary>,
    pub aia: Option<AiaSummary>,
    pub utility_metric: String,
    pub utility: Vec<UtilityPoint>,
    pub final_utility: Option<f64>,
    /// Epsilon from the built-in RDP accountant; indicative only.
    pub dp_epsilon_advisory: Option<f64>,
    pub targets: Vec<TargetOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub wall_clock_secs: f64,
    pub started_unix: u64,
    pub build: String,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub body: ReportBody,
    pub meta: ReportMeta,
}

/// Short names of one matrix cell, used as summary columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellLabel {
    pub dataset: String,
    pub protocol: String,
    pub model: String,
    pub defense: String,
}

/// One line of `summary.csv`. Attack columns are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub protocol: String,
    pub model: String,
    pub defense: String,
    #[serde(rename = "MaxAAC")]
    pub max_aac: Option<f64>,
    #[serde(rename = "Best10")]
    pub best10: Option<f64>,
    #[serde(rename = "randbound")]
    pub random_bound: Option<f64>,
    #[serde(rename = "upperbound")]
    pub upper_bound: Option<f64>,
    pub utility: Option<f64>,
}

fn pct(x: f64) -> f64 {
    (x * 1e4).round() / 1e2
}

impl ExperimentReport {
    pub fn summary_row(&self) -> SummaryRow {
        let b = &self.body;
        let cia = b.cia.as_ref();
        SummaryRow {
            dataset: b.label.dataset.clone(),
            protocol: b.label.protocol.clone(),
            model: b.label.model.clone(),
            defense: b.label.defense.clone(),
            max_aac: cia.map(|s| pct(s.max_aac)),
            best10: cia.map(|s| pct(s.best10)),
            random_bound: cia.map(|s| pct(s.random_bound)),
            upper_bound: cia.map(|s| pct(s.upper_bound)),
            utility: b.final_utility.map(|u| (u * 1e4).round() / 1e4),
        }
    }
}

/// Top-level `report.json`: every cell of the run, in matrix order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub complete: bool,
    pub cells: Vec<ExperimentReport>,
}

impl RunReport {
    /// Bodies only, as JSON; the part that must not vary between reruns.
    pub fn bodies_json(&self) -> Result<String> {
        let bodies: Vec<&ReportBody> = self.cells.iter().map(|c| &c.body).collect();
        Ok(serde_json::to_string_pretty(&bodies)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        let rows: Vec<SummaryRow> = self.cells.iter().map(|c| c.summary_row()).collect();
        write_csv(&dir.join("summary.csv"), &rows)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes rows as CSV to any sink (used for stdout).
pub fn write_csv_to<T: Serialize, W: Write>(sink: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}
