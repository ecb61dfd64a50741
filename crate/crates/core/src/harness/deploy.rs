// SPDX-License-Identifier: Apache-2.0

//! EVI deployment benchmark with per-stage latency breakdown.
//!
//! Every EVI goes through creation, policy creation and policy association
//! over the northbound API. Stage timings come from the controller, which
//! stamps requests on receipt and again when each stage completes.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::api::{L2vpnDoc, L2vpnRequest, RpRequest};
use crate::client::ApiClient;
use crate::model::{EviId, EviState, PeId};

use super::stats::{summarize, Summary};
use super::HarnessError;

pub const DEPLOY_WARMUP: usize = 5;

#[derive(Debug, Clone)]
pub struct DeployConfig {
    pub n: usize,
    pub inter_request_delay: Duration,
    pub pes_per_evi: usize,
    pub seed: u64,
    pub warmup: usize,
    pub poll_interval: Duration,
    pub stage_timeout: Duration,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            n: 10,
            inter_request_delay: Duration::from_secs(1),
            pes_per_evi: 2,
            seed: 1,
            warmup: DEPLOY_WARMUP,
            poll_interval: Duration::from_millis(2),
            stage_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub evi_id: EviId,
    pub l2vpn_ms: f64,
    pub rp_ms: f64,
    pub netconf_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploySummary {
    pub l2vpn_ms: Summary,
    pub rp_ms: Summary,
    pub netconf_ms: Summary,
    pub total_ms: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployReport {
    pub rows: Vec<StageTiming>,
    pub summary: Option<DeploySummary>,
    /// Set when the run stopped early; `rows` then holds what completed.
    pub partial: Option<String>,
    /// Every EVI the run created, warm-up included, with its PEs.
    pub assignments: BTreeMap<EviId, Vec<PeId>>,
}

impl DeployReport {
    fn summarize(&mut self) {
        let col = |f: fn(&StageTiming) -> f64| self.rows.iter().map(f).collect::<Vec<_>>();
        self.summary = (|| {
            Some(DeploySummary {
                l2vpn_ms: summarize(&col(|r| r.l2vpn_ms))?,
                rp_ms: summarize(&col(|r| r.rp_ms))?,
                netconf_ms: summarize(&col(|r| r.netconf_ms))?,
                total_ms: summarize(&col(|r| r.total_ms))?,
            })
        })();
    }
}

async fn poll_until(
    client: &ApiClient,
    id: EviId,
    cfg: &DeployConfig,
    done: impl Fn(&L2vpnDoc) -> bool,
) -> Result<L2vpnDoc, HarnessError> {
    let deadline = Instant::now() + cfg.stage_timeout;
    loop {
        let doc = client.l2vpn(id).await?;
        if doc.record.state == EviState::Failed {
            return Err(HarnessError::Deployment(format!(
                "EVI {id} failed: {}",
                doc.failure.unwrap_or_default()
            )));
        }
        if done(&doc) {
            return Ok(doc);
        }
        if Instant::now() >= deadline {
            return Err(HarnessError::Timeout(format!("EVI {id} stuck in {}", doc.record.state)));
        }
        tokio::time::sleep(cfg.poll_interval).await;
    }
}

async fn deploy_one(
    client: &ApiClient,
    i: usize,
    network: &str,
    pes: Vec<PeId>,
    cfg: &DeployConfig,
    report: &mut DeployReport,
) -> Result<StageTiming, HarnessError> {
    let created = client
        .create_l2vpn(&L2vpnRequest {
            customer_id: format!("customer{}", i % 10),
            virtual_network_id: format!("vn{i}"),
            sap_id: format!("sap{i}"),
            network_ids: vec![network.to_string()],
            pe_ids: pes.clone(),
        })
        .await?;
    let evi = created.id;
    report.assignments.insert(evi, pes);
    poll_until(client, evi, cfg, |d| d.record.state == EviState::Deployed).await?;

    let rp = client
        .create_rp(&RpRequest {
            name: format!("rp{i}"),
            allow_mac_advertisement: true,
            import_rts: Vec::new(),
            export_rts: Vec::new(),
            max_mac_routes: None,
        })
        .await?;
    client.associate(evi, rp.id).await?;
    let doc = poll_until(client, evi, cfg, |d| d.applied_rp_id == Some(rp.id) && d.timing.total_ms.is_some())
        .await?;
    let rp_doc = client.rp(rp.id).await?;
    Ok(StageTiming {
        evi_id: evi,
        l2vpn_ms: doc.timing.l2vpn_ms,
        rp_ms: rp_doc.rp_ms,
        netconf_ms: doc.timing.netconf_ms,
        total_ms: doc.timing.total_ms.unwrap_or_default(),
    })
}

/// Deploys `warmup + n` EVIs one after another; warm-up rows are dropped.
/// Each EVI gets its own randomly chosen network and `pes_per_evi` PEs
/// assigned round robin.
pub async fn run_deployment_bench(
    client: &ApiClient,
    networks: &[String],
    pes: &[PeId],
    cfg: &DeployConfig,
) -> Result<DeployReport, HarnessError> {
    let total = cfg.n + cfg.warmup;
    if networks.len() < total {
        return Err(HarnessError::Config(format!("{total} EVIs need as many networks, have {}", networks.len())));
    }
    if pes.is_empty() {
        return Err(HarnessError::Config("no PEs".into()));
    }
    let mut networks = networks.to_vec();
    networks.shuffle(&mut StdRng::seed_from_u64(cfg.seed));
    let per_evi = cfg.pes_per_evi.clamp(1, pes.len());

    let mut report = DeployReport { rows: Vec::new(), summary: None, partial: None, assignments: BTreeMap::new() };
    for (i, network) in networks.iter().take(total).enumerate() {
        let chosen: Vec<PeId> = (0..per_evi).map(|k| pes[(i + k) % pes.len()].clone()).collect();
        match deploy_one(client, i, network, chosen, cfg, &mut report).await {
            Ok(row) if i >= cfg.warmup => report.rows.push(row),
            Ok(_) => {}
            Err(e) => {
                report.partial = Some(e.to_string());
                break;
            }
        }
        if (i + 1) % 100 == 0 {
            info!(done = i + 1, total, "deployment bench progress");
        }
        if i + 1 < total {
            tokio::time::sleep(cfg.inter_request_delay).await;
        }
    }
    report.summarize();
    Ok(report)
}
