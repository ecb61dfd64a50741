// SPDX-License-Identifier: Apache-2.0

//! In-process test bed: a controller wired to a set of simulated PEs.

use std::net::{Ipv4Addr, SocketAddr};
use std::time::{Duration, Instant};

use crate::api::L2vpnRequest;
use crate::bgp::SessionState;
use crate::client::ApiClient;
use crate::controller::{Controller, ControllerConfig};
use crate::inventory::{Inventory, NetworkInfo, PeInfo, PortInfo};
use crate::model::{EviState, RouteTarget};
use crate::sim::{PeSimulator, SimConfig, SimLatencyProfile};

use super::HarnessError;

/// First VNI handed out to lab networks; network `net{i}` gets `VNI_BASE + i`.
pub const VNI_BASE: u32 = 10_000;

#[derive(Debug, Clone)]
pub struct LabConfig {
    pub pes: usize,
    pub networks: usize,
    pub latency: SimLatencyProfile,
    pub ports: Vec<PortInfo>,
    pub controller: ControllerConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            pes: 2,
            networks: 16,
            latency: SimLatencyProfile::default(),
            ports: Vec::new(),
            controller: ControllerConfig {
                http_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
                ..ControllerConfig::default()
            },
        }
    }
}

pub fn network_id(i: usize) -> String {
    format!("net{i}")
}

pub fn pe_id(i: usize) -> String {
    format!("pe{}", i + 1)
}

#[derive(Debug)]
pub struct Lab {
    pub sims: Vec<PeSimulator>,
    pub controller: Controller,
    pub inventory: Inventory,
    base_config: bool,
}

impl Lab {
    pub async fn start(cfg: LabConfig) -> Result<Self, HarnessError> {
        let mut sims = Vec::with_capacity(cfg.pes);
        for i in 0..cfg.pes {
            let sim = PeSimulator::start(SimConfig {
                id: pe_id(i),
                asn: 65001 + i as u16,
                router_id: Ipv4Addr::new(10, 255, 0, i as u8 + 1),
                latency: cfg.latency,
                ..SimConfig::default()
            })
            .await?;
            sims.push(sim);
        }
        let inventory = Inventory {
            pes: sims
                .iter()
                .map(|s| PeInfo { id: s.id().to_string(), mgmt_addr: s.netconf_addr(), bgp_addr: s.bgp_addr() })
                .collect(),
            networks: (0..cfg.networks)
                .map(|i| NetworkInfo { id: network_id(i), vni: VNI_BASE + i as u32 })
                .collect(),
            ports: cfg.ports,
        };
        let base_config = cfg.controller.push_base_config;
        let controller = Controller::start(cfg.controller, inventory.clone()).await?;
        Ok(Self { sims, controller, inventory, base_config })
    }

    pub fn client(&self) -> ApiClient {
        ApiClient::new(&self.controller.http_addr().to_string())
    }

    pub fn sim(&self, id: &str) -> Option<&PeSimulator> {
        self.sims.iter().find(|s| s.id() == id)
    }

    /// Waits until the controller has a session up with every simulated PE
    /// and, unless disabled, the base configuration reached each of them.
    pub async fn wait_established(&self, timeout: Duration) -> Result<(), HarnessError> {
        let deadline = Instant::now() + timeout;
        for s in &self.sims {
            let left = deadline.saturating_duration_since(Instant::now());
            let up = match self.controller.speaker().peer(s.id()) {
                Some(p) => p.wait_for(SessionState::Established, left).await,
                None => false,
            };
            if !up {
                return Err(HarnessError::Timeout(format!("BGP session to {}", s.id())));
            }
            if self.base_config {
                while s.running().find("bgp").is_none() {
                    if Instant::now() >= deadline {
                        return Err(HarnessError::Timeout(format!("base configuration on {}", s.id())));
                    }
                    tokio::time::sleep(Duration::from_millis(2)).await;
                }
            }
        }
        Ok(())
    }
}

/// Controller in reflect mode with one deployed EVI and an open BGP port,
/// ready for the traffic generator.
#[derive(Debug)]
pub struct GeneratorLab {
    pub lab: Lab,
    pub bgp_addr: SocketAddr,
    pub route_target: RouteTarget,
}

impl GeneratorLab {
    pub async fn start(instrumentation: bool) -> Result<Self, HarnessError> {
        let lab = Lab::start(LabConfig {
            pes: 1,
            networks: 1,
            controller: ControllerConfig {
                http_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
                bgp_listen: Some(SocketAddr::from(([127, 0, 0, 1], 0))),
                reflect: true,
                instrumentation,
                ..ControllerConfig::default()
            },
            ..LabConfig::default()
        })
        .await?;
        lab.wait_established(Duration::from_secs(10)).await?;
        let svc = lab.controller.service();
        let req = L2vpnRequest {
            customer_id: "bench".into(),
            virtual_network_id: "bench".into(),
            sap_id: "bench".into(),
            network_ids: vec![network_id(0)],
            pe_ids: vec![pe_id(0)],
        };
        let evi = svc.create_l2vpn(req, Instant::now()).await.map_err(|e| HarnessError::Deployment(e.to_string()))?;
        let deadline = Instant::now() + Duration::from_secs(10);
        let route_target = loop {
            match svc.l2vpn(evi) {
                Some(d) if d.record.state == EviState::Deployed => break d.record.rt,
                Some(d) if d.record.state == EviState::Failed => {
                    return Err(HarnessError::Deployment(d.failure.unwrap_or_default()))
                }
                _ if Instant::now() >= deadline => return Err(HarnessError::Timeout(format!("EVI {evi}"))),
                _ => tokio::time::sleep(Duration::from_millis(2)).await,
            }
        };
        let bgp_addr = lab.controller.bgp_addr().expect("BGP listener configured");
        Ok(Self { lab, bgp_addr, route_target })
    }
}
