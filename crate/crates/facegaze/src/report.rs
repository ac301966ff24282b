//! Evaluation report: per-section, per-regressor, per-eye angular errors in
//! the Left / Right / Mean layout, plus per-frame records and a config echo.

use facegaze_core::regress::ErrorStats;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::suite::SectionKind;

pub const REPORT_SCHEMA: &str = "facegaze.report/1";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

impl From<ErrorStats> for Stats {
    fn from(s: ErrorStats) -> Self {
        Self { count: s.count, mean: s.mean, median: s.median, p90: s.p90 }
    }
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        ErrorStats::from_errors(values).into()
    }
}

/// Arithmetic mean of the left and right columns.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanColumn {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

impl MeanColumn {
    pub fn of(left: &Stats, right: &Stats) -> Self {
        Self {
            mean: 0.5 * (left.mean + right.mean),
            median: 0.5 * (left.median + right.median),
            p90: 0.5 * (left.p90 + right.p90),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regressor {
    Knn,
    Alr,
}

/// Angular errors of one regressor on the test frames, degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorResult {
    pub regressor: Regressor,
    /// `k` for kNN, `eps` for adaptive linear regression.
    pub parameter: f64,
    pub left: Stats,
    pub right: Stats,
    pub mean: MeanColumn,
    /// Test-frame eyes the regressor produced no estimate for.
    pub failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FailureCounts {
    pub fit: usize,
    pub normalize: usize,
    pub extraction: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitSummary {
    pub attempted: usize,
    pub converged: usize,
    pub iterations: Stats,
    pub rotation_error_deg: Stats,
    pub translation_error_mm: Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedStage {
    Fit,
    Normalize,
    Extraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub stage: FailedStage,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFit {
    pub converged: bool,
    pub iterations: usize,
    pub rotation_error_deg: f64,
    pub translation_error_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeEstimate {
    /// Camera-frame gaze estimate, or `None` when the regressor failed.
    pub gaze: Option<[f64; 3]>,
    pub error_deg: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimate {
    pub regressor: Regressor,
    pub left: EyeEstimate,
    pub right: EyeEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub screen: [f64; 2],
    pub gaze: [f64; 3],
    pub split: Split,
    pub fit: Option<FrameFit>,
    pub failure: Option<FrameFailure>,
    pub estimates: Vec<FrameEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionReport {
    pub name: SectionKind,
    pub frames: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub failures: FailureCounts,
    pub fit: FitSummary,
    pub results: Vec<RegressorResult>,
    pub per_frame: Vec<FrameRecord>,
}

impl SectionReport {
    pub fn result(&self, regressor: Regressor) -> Option<&RegressorResult> {
        self.results.iter().find(|r| r.regressor == regressor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self { name: env!("CARGO_PKG_NAME").into(), version: env!("CARGO_PKG_VERSION").into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteInfo {
    /// `synthetic` or the suite directory as given.
    pub source: String,
    pub manifest_sha256: Option<String>,
    pub model_vertices: usize,
    pub model_modes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: String,
    pub tool: ToolInfo,
    pub config: PipelineConfig,
    pub suite: SuiteInfo,
    pub sections: Vec<SectionReport>,
}

impl EvaluationReport {
    pub fn section(&self, kind: SectionKind) -> Option<&SectionReport> {
        self.sections.iter().find(|s| s.name == kind)
    }

    pub fn to_json(&self) -> String {
        crate::formats::to_json_string(self)
    }

    pub fn checksum(&self) -> String {
        crate::formats::sha256_hex(self.to_json().as_bytes())
    }
}
