//! Report files written by `fit`, `eval` and `causal`: JSON with the full
//! resolved configuration embedded for provenance.

use serde::{Deserialize, Serialize};
use sysid::{FitReport, StartSummary, Timings};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityReport {
    pub zeros: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReportFile {
    pub version: String,
    pub config: RunConfig,
    pub best_start: usize,
    pub r2_train: Vec<f64>,
    pub r2_train_avg: f64,
    pub final_loss: f64,
    pub mse: f64,
    pub sparsity: SparsityReport,
    pub effective_order: usize,
    pub active_inputs: usize,
    pub saturation_in_eval: bool,
    pub per_start: Vec<StartSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl FitReportFile {
    pub fn new(config: &RunConfig, report: &FitReport) -> Self {
        FitReportFile {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            best_start: report.best_start,
            r2_train: report.r2_train.clone(),
            r2_train_avg: report.r2_train_avg,
            final_loss: report.final_loss,
            mse: report.mse,
            sparsity: SparsityReport {
                zeros: report.sparsity_zeros,
                total: report.sparsity_total,
            },
            effective_order: report.effective_order,
            active_inputs: report.active_inputs,
            saturation_in_eval: report.saturation_in_eval,
            per_start: report.starts.clone(),
            timings: if config.report.include_timings {
                Some(report.timings.clone())
            } else {
                None
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReportFile {
    pub version: String,
    pub x0_policy: String,
    pub r2_per_output: Vec<f64>,
    pub r2_avg: f64,
    pub mse: f64,
    pub x0_used: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_r2: Option<Vec<f64>>,
}
