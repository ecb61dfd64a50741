// SPDX-License-Identifier: Apache-2.0

//! Controller assembly: service, BGP speaker, PE configurator and HTTP API.

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tracing::{info, warn};

use crate::bgp::{FlushPolicy, Speaker, SpeakerConfig};
use crate::inventory::{Inventory, InventoryError};
use crate::model::ModelError;
use crate::northbound::{self, ApiState};
use crate::peconf::{render_base_config, PeConfigurator};
use crate::service::{self, ServiceConfig, ServiceHandle, ServiceParts};
use crate::trace::WbtTracer;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub asn: u16,
    pub router_id: Ipv4Addr,
    pub http_addr: SocketAddr,
    /// Accept inbound BGP sessions here (e.g. from a traffic generator).
    pub bgp_listen: Option<SocketAddr>,
    pub reflect: bool,
    pub instrumentation: bool,
    pub label_base: u32,
    pub label_pool_size: u32,
    pub rpc_timeout: Duration,
    pub hold_time: u16,
    pub flush: FlushPolicy,
    /// Push the BGP base configuration to every PE at startup.
    pub push_base_config: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let svc = ServiceConfig::default();
        Self {
            asn: svc.asn,
            router_id: svc.router_id,
            http_addr: SocketAddr::from(([127, 0, 0, 1], 8181)),
            bgp_listen: None,
            reflect: false,
            instrumentation: false,
            label_base: svc.label_base,
            label_pool_size: svc.label_pool_size,
            rpc_timeout: Duration::from_secs(10),
            hold_time: 90,
            flush: FlushPolicy::default(),
            push_base_config: true,
        }
    }
}

#[derive(Debug)]
pub struct Controller {
    service: ServiceHandle,
    speaker: Arc<Speaker>,
    tracer: Arc<WbtTracer>,
    configurator: Arc<PeConfigurator>,
    http_addr: SocketAddr,
    bgp_addr: Option<SocketAddr>,
    tasks: Vec<JoinHandle<()>>,
}

impl Controller {
    pub async fn start(cfg: ControllerConfig, inventory: Inventory) -> Result<Self, ControllerError> {
        inventory.check()?;
        let inventory = Arc::new(inventory);
        let tracer = Arc::new(WbtTracer::new(cfg.instrumentation));
        let configurator = Arc::new(PeConfigurator::new(
            inventory.pes.iter().map(|p| (p.id.clone(), p.mgmt_addr)),
            cfg.rpc_timeout,
        ));
        let slot: Arc<OnceLock<Arc<Speaker>>> = Arc::default();
        let (service, sink, run) = service::build(ServiceParts {
            config: ServiceConfig {
                asn: cfg.asn,
                router_id: cfg.router_id,
                reflect: cfg.reflect,
                label_base: cfg.label_base,
                label_pool_size: cfg.label_pool_size,
            },
            inventory: inventory.clone(),
            configurator: configurator.clone(),
            speaker_slot: slot.clone(),
            tracer: Some(tracer.clone()),
        })?;
        let mut tasks = vec![tokio::spawn(run)];

        let speaker = Speaker::new(
            SpeakerConfig {
                local_asn: cfg.asn,
                router_id: cfg.router_id,
                hold_time: cfg.hold_time,
                flush: cfg.flush,
                ..SpeakerConfig::default()
            },
            Arc::new(sink),
            Some(tracer.clone()),
        );
        let _ = slot.set(speaker.clone());

        let bgp_addr = match cfg.bgp_listen {
            Some(addr) => {
                let l = TcpListener::bind(addr).await?;
                let local = l.local_addr()?;
                speaker.listen(l);
                Some(local)
            }
            None => None,
        };
        for pe in &inventory.pes {
            speaker.connect(pe.id.clone(), pe.bgp_addr);
        }

        if cfg.push_base_config {
            for pe in &inventory.pes {
                let conf = configurator.clone();
                let doc = render_base_config(&pe.id, &[cfg.router_id.into()]);
                let id = pe.id.clone();
                tasks.push(tokio::spawn(async move {
                    let result = match doc {
                        Ok(doc) => conf.push_transaction(vec![doc]).await.map(|r| r.committed()),
                        Err(e) => Err(e),
                    };
                    match result {
                        Ok(true) => info!(pe = %id, "base configuration committed"),
                        Ok(false) => warn!(pe = %id, "base configuration rejected"),
                        Err(e) => warn!(pe = %id, "base configuration failed: {e}"),
                    }
                }));
            }
        }

        let listener = TcpListener::bind(cfg.http_addr).await?;
        let http_addr = listener.local_addr()?;
        let app = northbound::router(ApiState { service: service.clone(), speaker: slot });
        tasks.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                warn!("HTTP server stopped: {e}");
            }
        }));
        info!(%http_addr, ?bgp_addr, "controller started");

        Ok(Self { service, speaker, tracer, configurator, http_addr, bgp_addr, tasks })
    }

    pub fn service(&self) -> &ServiceHandle {
        &self.service
    }

    pub fn speaker(&self) -> &Arc<Speaker> {
        &self.speaker
    }

    pub fn tracer(&self) -> &Arc<WbtTracer> {
        &self.tracer
    }

    pub fn configurator(&self) -> &Arc<PeConfigurator> {
        &self.configurator
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn bgp_addr(&self) -> Option<SocketAddr> {
        self.bgp_addr
    }

    pub fn shutdown(&mut self) {
        self.speaker.shutdown();
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

impl Drop for Controller {
    fn drop(&mut self) {
        self.shutdown();
    }
}
