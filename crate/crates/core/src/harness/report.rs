// SPDX-License-Identifier: Apache-2.0

//! CSV, CDF and JSON summary files for benchmark runs.
//!
//! File names depend only on the label, so repeated runs overwrite each
//! other rather than accumulating.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trace::WbtReport;

use super::deploy::DeployReport;
use super::stats::{cdf, mean, summarize, Summary};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSummary {
    pub label: String,
    pub repeat_count: usize,
    pub per_repetition_means: Vec<f64>,
    pub pooled: Summary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub data: PathBuf,
    pub cdf: Option<PathBuf>,
    pub summary: PathBuf,
}

#[derive(Serialize)]
struct RttRow {
    repetition: usize,
    index: usize,
    rtt_ms: f64,
}

#[derive(Serialize)]
struct CdfRow {
    value_ms: f64,
    cumulative_probability: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn write_cdf(path: &Path, values: &[f64]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for (value_ms, cumulative_probability) in cdf(values) {
        w.serialize(CdfRow { value_ms, cumulative_probability })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `{label}_rtt.csv`, `{label}_cdf.csv` and `{label}_summary.json`
/// for one or more repetitions of the same measurement.
pub fn emit_rtt_report(
    out_dir: &Path,
    label: &str,
    repetitions: &[Vec<f64>],
) -> Result<(ReportFiles, RttSummary), HarnessError> {
    let pooled: Vec<f64> = repetitions.iter().flatten().copied().collect();
    let summary = RttSummary {
        label: label.to_string(),
        repeat_count: repetitions.len(),
        per_repetition_means: repetitions.iter().filter_map(|r| mean(r)).collect(),
        pooled: summarize(&pooled).ok_or_else(|| HarnessError::EmptyReport(label.to_string()))?,
    };
    std::fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        data: out_dir.join(format!("{label}_rtt.csv")),
        cdf: Some(out_dir.join(format!("{label}_cdf.csv"))),
        summary: out_dir.join(format!("{label}_summary.json")),
    };
    let mut w = csv::Writer::from_path(&files.data)?;
    for (repetition, run) in repetitions.iter().enumerate() {
        for (index, rtt_ms) in run.iter().enumerate() {
            w.serialize(RttRow { repetition, index, rtt_ms: *rtt_ms })?;
        }
    }
    w.flush()?;
    write_cdf(files.cdf.as_ref().unwrap(), &pooled)?;
    write_json(&files.summary, &summary)?;
    Ok((files, summary))
}

/// Writes `deploy_stages.csv` and `deploy_summary.json`.
pub fn emit_deploy_report(out_dir: &Path, report: &DeployReport) -> Result<ReportFiles, HarnessError> {
    if report.rows.is_empty() {
        return Err(HarnessError::EmptyReport("deploy".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        data: out_dir.join("deploy_stages.csv"),
        cdf: None,
        summary: out_dir.join("deploy_summary.json"),
    };
    let mut w = csv::Writer::from_path(&files.data)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Doc<'a> {
        n: usize,
        partial: &'a Option<String>,
        summary: &'a Option<super::deploy::DeploySummary>,
    }
    write_json(&files.summary, &Doc { n: report.rows.len(), partial: &report.partial, summary: &report.summary })?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WbtSummary {
    pub instrumentation_enabled: bool,
    pub records: usize,
    pub mean_pipeline_ms: Option<f64>,
    pub mean_bus_ms: Option<f64>,
    pub mean_bus_share: Option<f64>,
}

/// Writes `wbt_records.csv`, `wbt_cdf.csv` and `wbt_summary.json`. A report
/// from a disabled tracer still produces a summary carrying the flag.
pub fn emit_wbt_report(out_dir: &Path, report: &WbtReport) -> Result<(ReportFiles, WbtSummary), HarnessError> {
    let summary = WbtSummary {
        instrumentation_enabled: report.instrumentation_enabled,
        records: report.records.len(),
        mean_pipeline_ms: report.mean_pipeline_ms(),
        mean_bus_ms: report.mean_bus_ms(),
        mean_bus_share: mean(&report.records.iter().map(|r| r.bus_share).collect::<Vec<_>>()),
    };
    if report.instrumentation_enabled && report.records.is_empty() {
        return Err(HarnessError::EmptyReport("wbt".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        data: out_dir.join("wbt_records.csv"),
        cdf: Some(out_dir.join("wbt_cdf.csv")),
        summary: out_dir.join("wbt_summary.json"),
    };
    let mut w = csv::Writer::from_path(&files.data)?;
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    write_cdf(files.cdf.as_ref().unwrap(), &report.records.iter().map(|r| r.pipeline_ms).collect::<Vec<_>>())?;
    write_json(&files.summary, &summary)?;
    Ok((files, summary))
}
