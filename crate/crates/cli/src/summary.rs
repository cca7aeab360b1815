//! `summary.json`: what a run produced, read back by `hoplab report`.

use serde::{Deserialize, Serialize};

pub const RESULTS_FILE: &str = "results.csv";
pub const FITS_FILE: &str = "fits.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.txt";

/// Columns appended to every results row.
pub const PROVENANCE_COLUMNS: &str = "master_seed,sub_seed_label,manifest_hash";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Outside the band but qualitatively right; see the note.
    Deviation,
    /// No prediction to compare against.
    Info,
}

impl Status {
    pub fn tag(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Deviation => "DEVIATION",
            Status::Info => "info",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub experiment: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
    pub predicted: Option<f64>,
    pub tolerance: Option<f64>,
    pub status: Status,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: String,
    pub name: String,
    pub manifest_hash: String,
    pub master_seed: u64,
    pub results_file: String,
    pub columns: Vec<String>,
    pub rows: usize,
    pub fits: Vec<FitRecord>,
    pub checks: Vec<CheckRecord>,
    pub notes: Vec<String>,
}
