// SPDX-License-Identifier: Apache-2.0

//! Benchmark harness: deployment scaling and control-plane response times.

pub mod deploy;
pub mod generator;
pub mod lab;
pub mod report;
pub mod stats;

use thiserror::Error;

use crate::client::ClientError;
use crate::controller::ControllerError;
use crate::model::MacAddr;
use crate::trace::{WbtReport, WbtTracer};

pub use deploy::{run_deployment_bench, DeployConfig, DeployReport, StageTiming};
pub use generator::{run_generator, GenMode, GeneratorConfig, GeneratorRun, RttSample};
pub use lab::{GeneratorLab, Lab, LabConfig};
pub use report::{emit_deploy_report, emit_rtt_report, emit_wbt_report};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Api(#[from] ClientError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("deployment failed: {0}")]
    Deployment(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("BGP: {0}")]
    Bgp(String),
    #[error("no reply for {} MAC(s): {}", .0.len(), fmt_macs(.0))]
    MissingReplies(Vec<MacAddr>),
    #[error("nothing to report for {0}")]
    EmptyReport(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_macs(macs: &[MacAddr]) -> String {
    let shown: Vec<String> = macs.iter().take(10).map(ToString::to_string).collect();
    let more = if macs.len() > 10 { format!(" and {} more", macs.len() - 10) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

/// Whitebox breakdown for the given messages, identified by their MACs.
pub fn collect_wbt(tracer: &WbtTracer, macs: &[MacAddr]) -> WbtReport {
    tracer.collect(macs)
}
