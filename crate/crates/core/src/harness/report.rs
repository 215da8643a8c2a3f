use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// CSV column order.
pub const CSV_COLUMNS: [&str; 21] = [
    "axis",
    "value",
    "method",
    "rank",
    "alpha",
    "layers",
    "clean_r1",
    "clean_r5",
    "clean_r10",
    "adv_r1",
    "adv_r5",
    "adv_r10",
    "def_r1",
    "def_r5",
    "def_r10",
    "mean_sim_clean",
    "mean_sim_adv",
    "mean_sim_def",
    "ms_per_batch",
    "images_per_s",
    "overhead",
];

/// Columns that depend on wall-clock time.
pub const TIMING_COLUMNS: [&str; 3] = ["ms_per_batch", "images_per_s", "overhead"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    /// Defense method, or `none` for the undefended baseline.
    pub method: String,
    pub rank: usize,
    pub alpha: f64,
    /// Target layers joined with `+`.
    pub layers: String,
    pub clean_r1: f64,
    pub clean_r5: f64,
    pub clean_r10: f64,
    pub adv_r1: f64,
    pub adv_r5: f64,
    pub adv_r10: f64,
    pub def_r1: f64,
    pub def_r5: f64,
    pub def_r10: f64,
    pub mean_sim_clean: f64,
    pub mean_sim_adv: f64,
    pub mean_sim_def: f64,
    pub ms_per_batch: f64,
    pub images_per_s: f64,
    pub overhead: f64,
}

impl SweepRow {
    fn cells(&self) -> [String; 21] {
        [
            self.axis.clone(),
            self.value.clone(),
            self.method.clone(),
            self.rank.to_string(),
            self.alpha.to_string(),
            self.layers.clone(),
            self.clean_r1.to_string(),
            self.clean_r5.to_string(),
            self.clean_r10.to_string(),
            self.adv_r1.to_string(),
            self.adv_r5.to_string(),
            self.adv_r10.to_string(),
            self.def_r1.to_string(),
            self.def_r5.to_string(),
            self.def_r10.to_string(),
            self.mean_sim_clean.to_string(),
            self.mean_sim_adv.to_string(),
            self.mean_sim_def.to_string(),
            format!("{:.3}", self.ms_per_batch),
            format!("{:.1}", self.images_per_s),
            format!("{:.3}", self.overhead),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Sweep,
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub kind: ReportKind,
    /// Swept axis; empty for bench reports.
    pub axis: String,
    pub values: Vec<String>,
    pub config: ExperimentConfig,
    pub seeds: Vec<(String, u64)>,
    /// Seconds since the Unix epoch when the report was produced.
    pub timestamp: u64,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::invalid(format!("unknown report format `{s}` (expected csv or json)"))),
        }
    }
}

impl ReportFormat {
    /// Format implied by a path's extension.
    pub fn for_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::invalid(format!("{} has no .csv or .json extension", path.display())))?
            .parse()
    }
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        self.csv_with(&CSV_COLUMNS)
    }

    /// CSV restricted to the columns that do not depend on timing.
    pub fn to_csv_untimed(&self) -> String {
        let cols: Vec<&str> = CSV_COLUMNS.iter().copied().filter(|c| !TIMING_COLUMNS.contains(c)).collect();
        self.csv_with(&cols)
    }

    fn csv_with(&self, cols: &[&str]) -> String {
        let idx: Vec<usize> = cols.iter().map(|c| CSV_COLUMNS.iter().position(|k| k == c).expect("known")).collect();
        let mut out = cols.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells = row.cells();
            let picked: Vec<String> = idx.iter().map(|&i| csv_escape(&cells[i])).collect();
            let _ = writeln!(out, "{}", picked.join(","));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emit_report(report: &SweepReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json(),
    };
    std::fs::write(path, text)?;
    Ok(())
}
