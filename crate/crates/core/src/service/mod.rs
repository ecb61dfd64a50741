// SPDX-License-Identifier: Apache-2.0

//! L2VPN orchestration service.
//!
//! A single consumer owns the tables and reacts to northbound commands, BGP
//! session events and completed configuration transactions, all arriving
//! over the instrumented bus. Commands touching an EVI whose transaction is
//! still in flight wait in a per-EVI FIFO; transactions for different EVIs
//! run concurrently.

pub mod tables;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::net::{IpAddr, Ipv4Addr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use tokio::sync::oneshot;
use tracing::{debug, warn};

use crate::api::{
    parse_route_targets, ArpAnswer, L2vpnDoc, L2vpnRequest, RpDoc, RpRequest,
};
use crate::bgp::session::PeerEvent;
use crate::bgp::queue::QueueError;
use crate::bgp::{EvpnRoute, ParsedUpdate, PathAttributes, PeerEventSink, SessionState, Speaker};
use crate::bus::{self, BusReceiver, BusSender};
use crate::inventory::Inventory;
use crate::model::{
    derive_rd_rt, EthernetSegmentId, EviId, EviRecord, EviState, MacAddr, ModelError, PeId,
    RouteTarget, RoutingPolicy, RpId,
};
use crate::peconf::{render_evi_config, render_evi_delete, PeConfigurator, TxnReport};
use crate::service::tables::{EviEntry, EviTiming, RemoteUpsert, RpEntry, Tables};
use crate::trace::WbtTracer;
use crate::LabelAllocator;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{message}")]
    Invalid { message: String, field: Option<String> },
    #[error("resource exhausted: {0}")]
    Exhausted(String),
    #[error("configuration transaction failed: {0}")]
    Transaction(String),
    #[error("service unavailable")]
    Unavailable,
}

impl ServiceError {
    fn invalid(message: impl Into<String>, field: impl Into<String>) -> Self {
        ServiceError::Invalid { message: message.into(), field: Some(field.into()) }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub asn: u16,
    pub router_id: Ipv4Addr,
    /// Echo every imported MAC/IP route back to the peer that sent it.
    pub reflect: bool,
    pub label_base: u32,
    pub label_pool_size: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            asn: 64512,
            router_id: Ipv4Addr::LOCALHOST,
            reflect: false,
            label_base: 100_000,
            label_pool_size: 100_000,
        }
    }
}

type Reply<T> = oneshot::Sender<Result<T, ServiceError>>;

#[derive(Debug)]
pub enum Command {
    CreateL2vpn { req: L2vpnRequest, receipt: Instant, reply: Reply<EviId> },
    DeleteL2vpn { evi_id: EviId, reply: Reply<()> },
    CreateRp { policy: RoutingPolicy, receipt: Instant, reply: Reply<RpId> },
    AssociateRp { evi_id: EviId, rp_id: RpId, reply: Reply<()> },
    EndpointUp { mac: MacAddr, ip: Option<IpAddr>, network_id: String, reply: Reply<Option<EviId>> },
    EndpointDown { mac: MacAddr, network_id: String, reply: Reply<Option<EviId>> },
}

#[derive(Debug, Clone, Copy)]
pub enum TxnKind {
    Create,
    Associate(RpId),
    Delete,
}

#[derive(Debug)]
pub enum Event {
    Command(Command),
    Bgp(PeerEvent),
    TxnDone { evi_id: EviId, kind: TxnKind, result: Result<TxnReport, String> },
}

#[derive(Debug)]
enum Deferred {
    ApplyPolicy(RpId),
    EndpointUp(MacAddr, Option<IpAddr>),
    EndpointDown(MacAddr),
}

#[derive(Debug, Clone)]
enum Target {
    All,
    Peer(PeId),
}

#[derive(Debug)]
enum Outbound {
    Advertise { target: Target, route: EvpnRoute, attrs: Arc<PathAttributes> },
    Withdraw { target: Target, route: EvpnRoute },
}

#[derive(Debug, Default)]
pub struct ServiceStats {
    pub events: AtomicU64,
    pub bus_transfer_ns: AtomicU64,
    pub filtered: AtomicU64,
    pub local_wins: AtomicU64,
    pub unmapped_endpoints: AtomicU64,
    pub arp_hits: AtomicU64,
    pub arp_misses: AtomicU64,
    pub advertisements: AtomicU64,
    pub withdrawals: AtomicU64,
    pub backpressure_waits: AtomicU64,
    pub txn_failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StatsSnapshot {
    pub events: u64,
    pub mean_bus_transfer_us: f64,
    pub filtered: u64,
    pub local_wins: u64,
    pub unmapped_endpoints: u64,
    pub arp_hits: u64,
    pub arp_misses: u64,
    pub advertisements: u64,
    pub withdrawals: u64,
    pub backpressure_waits: u64,
    pub txn_failures: u64,
}

impl ServiceStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let events = g(&self.events);
        StatsSnapshot {
            events,
            mean_bus_transfer_us: if events == 0 {
                0.0
            } else {
                g(&self.bus_transfer_ns) as f64 / events as f64 / 1e3
            },
            filtered: g(&self.filtered),
            local_wins: g(&self.local_wins),
            unmapped_endpoints: g(&self.unmapped_endpoints),
            arp_hits: g(&self.arp_hits),
            arp_misses: g(&self.arp_misses),
            advertisements: g(&self.advertisements),
            withdrawals: g(&self.withdrawals),
            backpressure_waits: g(&self.backpressure_waits),
            txn_failures: g(&self.txn_failures),
        }
    }
}

/// Delivers BGP session events onto the service bus.
#[derive(Debug, Clone)]
pub struct BusSink(pub BusSender<Event>);

impl PeerEventSink for BusSink {
    fn deliver(&self, event: PeerEvent) {
        self.0.send(Event::Bgp(event));
    }
}

/// Cloneable front door to the service: sends commands, reads snapshots.
#[derive(Debug, Clone)]
pub struct ServiceHandle {
    bus: BusSender<Event>,
    tables: Arc<RwLock<Tables>>,
    stats: Arc<ServiceStats>,
    inventory: Arc<Inventory>,
    started: Instant,
}

impl ServiceHandle {
    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn receipt_us(&self, at: Instant) -> u64 {
        at.saturating_duration_since(self.started).as_micros() as u64
    }

    async fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, ServiceError> {
        let (tx, rx) = oneshot::channel();
        if self.bus.send(Event::Command(make(tx))).is_none() {
            return Err(ServiceError::Unavailable);
        }
        rx.await.map_err(|_| ServiceError::Unavailable)?
    }

    /// Checks a creation request against the inventory.
    pub fn check_l2vpn(&self, req: &L2vpnRequest) -> Result<(), ServiceError> {
        if req.network_ids.is_empty() {
            return Err(ServiceError::invalid("network_ids must not be empty", "network_ids"));
        }
        if req.pe_ids.is_empty() {
            return Err(ServiceError::invalid("pe_ids must not be empty", "pe_ids"));
        }
        for (i, n) in req.network_ids.iter().enumerate() {
            if self.inventory.network(n).is_none() {
                return Err(ServiceError::invalid(format!("unknown network {n}"), format!("network_ids[{i}]")));
            }
        }
        for (i, p) in req.pe_ids.iter().enumerate() {
            if self.inventory.pe(p).is_none() {
                return Err(ServiceError::invalid(format!("unknown PE {p}"), format!("pe_ids[{i}]")));
            }
        }
        Ok(())
    }

    pub async fn create_l2vpn(&self, req: L2vpnRequest, receipt: Instant) -> Result<EviId, ServiceError> {
        self.check_l2vpn(&req)?;
        self.call(|reply| Command::CreateL2vpn { req, receipt, reply }).await
    }

    pub async fn delete_l2vpn(&self, evi_id: EviId) -> Result<(), ServiceError> {
        self.call(|reply| Command::DeleteL2vpn { evi_id, reply }).await
    }

    pub fn policy_from_request(req: &RpRequest) -> Result<RoutingPolicy, ServiceError> {
        let import_rts = parse_route_targets(&req.import_rts).map_err(|i| {
            ServiceError::invalid(format!("bad route target {:?}", req.import_rts[i]), format!("import_rts[{i}]"))
        })?;
        let export_rts = parse_route_targets(&req.export_rts).map_err(|i| {
            ServiceError::invalid(format!("bad route target {:?}", req.export_rts[i]), format!("export_rts[{i}]"))
        })?;
        if req.max_mac_routes == Some(0) {
            return Err(ServiceError::invalid("max_mac_routes must be positive", "max_mac_routes"));
        }
        Ok(RoutingPolicy {
            rp_id: 0,
            name: req.name.clone(),
            allow_mac_advertisement: req.allow_mac_advertisement,
            import_rts,
            export_rts,
            max_mac_routes: req.max_mac_routes,
        })
    }

    pub async fn create_rp(&self, req: RpRequest, receipt: Instant) -> Result<RpId, ServiceError> {
        let policy = Self::policy_from_request(&req)?;
        self.call(|reply| Command::CreateRp { policy, receipt, reply }).await
    }

    pub async fn associate_rp(&self, evi_id: EviId, rp_id: RpId) -> Result<(), ServiceError> {
        self.call(|reply| Command::AssociateRp { evi_id, rp_id, reply }).await
    }

    /// Host announcement (VM boot or GARP) on a network.
    pub async fn endpoint_up(
        &self,
        mac: MacAddr,
        ip: Option<IpAddr>,
        network_id: String,
    ) -> Result<Option<EviId>, ServiceError> {
        self.call(|reply| Command::EndpointUp { mac, ip, network_id, reply }).await
    }

    pub async fn endpoint_down(&self, mac: MacAddr, network_id: String) -> Result<Option<EviId>, ServiceError> {
        self.call(|reply| Command::EndpointDown { mac, network_id, reply }).await
    }

    pub fn with_tables<R>(&self, f: impl FnOnce(&Tables) -> R) -> R {
        f(&self.tables.read().unwrap())
    }

    pub fn l2vpn(&self, evi_id: EviId) -> Option<L2vpnDoc> {
        self.with_tables(|t| t.evis.get(&evi_id).map(l2vpn_doc))
    }

    pub fn l2vpns(&self) -> Vec<L2vpnDoc> {
        self.with_tables(|t| t.evis.values().map(l2vpn_doc).collect())
    }

    pub fn rp(&self, rp_id: RpId) -> Option<RpDoc> {
        self.with_tables(|t| t.rps.get(&rp_id).map(|r| rp_doc(t, r)))
    }

    pub fn rps(&self) -> Vec<RpDoc> {
        self.with_tables(|t| t.rps.values().map(|r| rp_doc(t, r)).collect())
    }

    pub fn lookup_mac(&self, mac: MacAddr, evi: EviId) -> Option<crate::model::MacTableEntry> {
        self.with_tables(|t| t.lookup_mac(mac, evi).cloned())
    }

    pub fn participating_pes(&self, vni: u32) -> BTreeSet<PeId> {
        self.with_tables(|t| t.participating_pes(vni))
    }

    /// Proxy ARP: answers from the MAC table of `evi_id` only.
    pub fn arp_query(&self, evi_id: EviId, ip: IpAddr) -> ArpAnswer {
        let mac = self.with_tables(|t| t.arp_lookup(evi_id, ip));
        let counter = if mac.is_some() { &self.stats.arp_hits } else { &self.stats.arp_misses };
        counter.fetch_add(1, Ordering::Relaxed);
        ArpAnswer { evi_id, ip, mac }
    }
}

fn l2vpn_doc(e: &EviEntry) -> L2vpnDoc {
    L2vpnDoc {
        record: e.record.clone(),
        applied_rp_id: e.applied_rp_id,
        failure: e.failure.clone(),
        timing: e.timing.into(),
    }
}

fn rp_doc(t: &Tables, r: &RpEntry) -> RpDoc {
    let evi_ids = t
        .evis
        .values()
        .filter(|e| e.record.rp_id == Some(r.policy.rp_id))
        .map(|e| e.record.evi_id)
        .collect();
    RpDoc { policy: r.policy.clone(), evi_ids, rp_ms: r.rp_ms }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Everything the service needs from the rest of the controller.
pub struct ServiceParts {
    pub config: ServiceConfig,
    pub inventory: Arc<Inventory>,
    pub configurator: Arc<PeConfigurator>,
    pub speaker_slot: Arc<std::sync::OnceLock<Arc<Speaker>>>,
    pub tracer: Option<Arc<WbtTracer>>,
}

/// Creates the service bus and returns the handle, a sink for the BGP
/// speaker, and a future that runs the consumer and outbound dispatcher.
pub fn build(
    parts: ServiceParts,
) -> Result<(ServiceHandle, BusSink, impl std::future::Future<Output = ()>), ModelError> {
    let (tx, rx) = bus::channel();
    let (out_tx, out_rx) = bus::channel();
    let labels = LabelAllocator::new(parts.config.label_base, parts.config.label_pool_size)?;
    let tables = Arc::new(RwLock::new(Tables::default()));
    let stats = Arc::new(ServiceStats::default());
    let handle = ServiceHandle {
        bus: tx.clone(),
        tables: tables.clone(),
        stats: stats.clone(),
        inventory: parts.inventory.clone(),
        started: Instant::now(),
    };
    let mut ports: HashMap<String, BTreeMap<MacAddr, Option<IpAddr>>> = HashMap::new();
    for p in &parts.inventory.ports {
        ports.entry(p.network_id.clone()).or_default().insert(p.mac, p.ip);
    }
    let core = Core {
        cfg: parts.config,
        inventory: parts.inventory,
        tables,
        stats: stats.clone(),
        tracer: parts.tracer.clone(),
        labels,
        next_evi: 1,
        next_rp: 1,
        configurator: parts.configurator,
        speaker: parts.speaker_slot.clone(),
        bus: tx.clone(),
        out: out_tx,
        busy: HashMap::new(),
        adj_out: BTreeMap::new(),
        remote_index: HashMap::new(),
        import_index: HashMap::new(),
        ports,
        inflight_creates: HashMap::new(),
        delete_replies: HashMap::new(),
    };
    let speaker_slot = parts.speaker_slot;
    let tracer = parts.tracer;
    let run = async move {
        let dispatcher = tokio::spawn(dispatch(out_rx, speaker_slot, tracer, stats));
        core.run(rx).await;
        dispatcher.abort();
    };
    Ok((handle, BusSink(tx), run))
}

struct Core {
    cfg: ServiceConfig,
    inventory: Arc<Inventory>,
    tables: Arc<RwLock<Tables>>,
    stats: Arc<ServiceStats>,
    tracer: Option<Arc<WbtTracer>>,
    labels: LabelAllocator,
    next_evi: EviId,
    next_rp: RpId,
    configurator: Arc<PeConfigurator>,
    speaker: Arc<std::sync::OnceLock<Arc<Speaker>>>,
    bus: BusSender<Event>,
    out: BusSender<Outbound>,
    /// EVIs with a transaction in flight, with the work waiting behind it.
    busy: HashMap<EviId, VecDeque<Deferred>>,
    /// Locally originated routes currently advertised, per EVI and route key.
    adj_out: BTreeMap<EviId, BTreeMap<EvpnRoute, (EvpnRoute, Arc<PathAttributes>)>>,
    /// Which EVIs imported a given (peer, route key).
    remote_index: HashMap<(PeId, EvpnRoute), BTreeSet<EviId>>,
    import_index: HashMap<RouteTarget, BTreeSet<EviId>>,
    /// Known ports per network, including ones whose network has no EVI yet.
    ports: HashMap<String, BTreeMap<MacAddr, Option<IpAddr>>>,
    inflight_creates: HashMap<L2vpnRequest, EviId>,
    delete_replies: HashMap<EviId, Reply<()>>,
}

impl Core {
    async fn run(mut self, mut rx: BusReceiver<Event>) {
        while let Some(d) = rx.recv().await {
            self.stats.events.fetch_add(1, Ordering::Relaxed);
            self.stats
                .bus_transfer_ns
                .fetch_add(d.transfer_time().as_nanos() as u64, Ordering::Relaxed);
            match d.payload {
                Event::Command(c) => self.command(c),
                Event::Bgp(PeerEvent::Update { peer, update, .. }) => {
                    if let Some(t) = &self.tracer {
                        for mac in update.advertised.iter().filter_map(EvpnRoute::mac) {
                            t.mark_bus_in(mac, d.enqueued_at, d.dequeued_at);
                        }
                    }
                    self.remote_update(&peer, update);
                }
                Event::Bgp(PeerEvent::Up { peer }) => self.peer_up(&peer),
                Event::Bgp(PeerEvent::Down { peer, .. }) => self.peer_down(&peer),
                Event::TxnDone { evi_id, kind, result } => self.txn_done(evi_id, kind, result),
            }
        }
    }

    fn tables(&self) -> std::sync::RwLockWriteGuard<'_, Tables> {
        self.tables.write().unwrap()
    }

    fn command(&mut self, c: Command) {
        match c {
            Command::CreateL2vpn { req, receipt, reply } => {
                let _ = reply.send(self.create(req, receipt));
            }
            Command::DeleteL2vpn { evi_id, reply } => match self.delete(evi_id) {
                Ok(()) => {
                    self.delete_replies.insert(evi_id, reply);
                }
                Err(e) => {
                    let _ = reply.send(Err(e));
                }
            },
            Command::CreateRp { mut policy, receipt, reply } => {
                policy.rp_id = self.next_rp;
                self.next_rp += 1;
                let rp_id = policy.rp_id;
                let rp_ms = ms(receipt.elapsed());
                self.tables().rps.insert(rp_id, RpEntry { policy, rp_ms });
                let _ = reply.send(Ok(rp_id));
            }
            Command::AssociateRp { evi_id, rp_id, reply } => {
                let _ = reply.send(self.associate(evi_id, rp_id));
            }
            Command::EndpointUp { mac, ip, network_id, reply } => {
                self.ports.entry(network_id.clone()).or_default().insert(mac, ip);
                let evi = self.tables.read().unwrap().evi_of_network(&network_id);
                match evi {
                    None => {
                        warn!(%mac, network = %network_id, "endpoint on a network without EVI");
                        self.stats.unmapped_endpoints.fetch_add(1, Ordering::Relaxed);
                    }
                    Some(evi) => self.run_or_defer(evi, Deferred::EndpointUp(mac, ip)),
                }
                let _ = reply.send(Ok(evi));
            }
            Command::EndpointDown { mac, network_id, reply } => {
                if let Some(p) = self.ports.get_mut(&network_id) {
                    p.remove(&mac);
                }
                let evi = self.tables.read().unwrap().evi_of_network(&network_id);
                if let Some(evi) = evi {
                    self.run_or_defer(evi, Deferred::EndpointDown(mac));
                }
                let _ = reply.send(Ok(evi));
            }
        }
    }

    fn run_or_defer(&mut self, evi: EviId, work: Deferred) {
        match self.busy.get_mut(&evi) {
            Some(q) => q.push_back(work),
            None => self.apply(evi, work),
        }
    }

    fn apply(&mut self, evi: EviId, work: Deferred) {
        match work {
            Deferred::ApplyPolicy(rp_id) => self.push_policy(evi, rp_id),
            Deferred::EndpointUp(mac, ip) => {
                let label = match self.tables.read().unwrap().evis.get(&evi) {
                    Some(e) => e.record.mpls_label,
                    None => return,
                };
                if self.tables().insert_local(mac, ip, evi, label, Instant::now()) {
                    self.reevaluate(evi);
                }
            }
            Deferred::EndpointDown(mac) => {
                if self.tables().remove_local(mac, evi) {
                    self.reevaluate(evi);
                }
            }
        }
    }

    fn create(&mut self, req: L2vpnRequest, receipt: Instant) -> Result<EviId, ServiceError> {
        if let Some(evi) = self.inflight_creates.get(&req) {
            return Err(ServiceError::Conflict(format!("identical request in flight as EVI {evi}")));
        }
        let first = req.network_ids.first().ok_or_else(|| {
            ServiceError::invalid("network_ids must not be empty", "network_ids")
        })?;
        let vni = self
            .inventory
            .network(first)
            .ok_or_else(|| ServiceError::invalid(format!("unknown network {first}"), "network_ids[0]"))?
            .vni;
        {
            let t = self.tables.read().unwrap();
            for n in &req.network_ids {
                if let Some(other) = t.evi_of_network(n) {
                    return Err(ServiceError::Conflict(format!("network {n} already belongs to EVI {other}")));
                }
            }
            if let Some(other) = t.vni_in_use(vni) {
                return Err(ServiceError::Conflict(format!("VNI {vni} already belongs to EVI {other}")));
            }
        }
        let evi_id = self.next_evi;
        let (rd, rt) = derive_rd_rt(u64::from(evi_id), self.cfg.asn)
            .map_err(|e| ServiceError::Exhausted(e.to_string()))?;
        let mpls_label = self
            .labels
            .allocate(evi_id)
            .map_err(|e| ServiceError::Exhausted(e.to_string()))?;
        self.next_evi += 1;

        let record = EviRecord {
            evi_id,
            customer_id: req.customer_id.clone(),
            virtual_network_id: req.virtual_network_id.clone(),
            sap_id: req.sap_id.clone(),
            network_ids: req.network_ids.iter().cloned().collect(),
            pe_ids: req.pe_ids.iter().cloned().collect(),
            rd,
            rt,
            mpls_label,
            vni,
            rp_id: None,
            state: EviState::Pending,
        };
        let docs = record
            .pe_ids
            .iter()
            .map(|pe| render_evi_config(&record, None, pe))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ServiceError::Transaction(e.to_string()))?;
        self.import_index.entry(rt).or_default().insert(evi_id);
        let now = Instant::now();
        {
            let mut t = self.tables();
            t.insert_evi(EviEntry {
                record: record.clone(),
                applied_rp_id: None,
                failure: None,
                received_at: receipt,
                timing: EviTiming::default(),
            });
            for n in &record.network_ids {
                for (mac, ip) in self.ports.get(n).into_iter().flatten() {
                    t.insert_local(*mac, *ip, evi_id, mpls_label, now);
                }
            }
        }
        self.inflight_creates.insert(req, evi_id);
        self.spawn_txn(evi_id, TxnKind::Create, docs);
        self.tables().evis.get_mut(&evi_id).unwrap().timing.l2vpn_ms = ms(receipt.elapsed());
        Ok(evi_id)
    }

    fn associate(&mut self, evi_id: EviId, rp_id: RpId) -> Result<(), ServiceError> {
        {
            let mut t = self.tables();
            if !t.rps.contains_key(&rp_id) {
                return Err(ServiceError::NotFound(format!("rp {rp_id}")));
            }
            let e = t.evis.get_mut(&evi_id).ok_or_else(|| ServiceError::NotFound(format!("l2vpn {evi_id}")))?;
            if e.record.state == EviState::Deleting {
                return Err(ServiceError::Conflict(format!("EVI {evi_id} is being deleted")));
            }
            e.record.rp_id = Some(rp_id);
        }
        self.run_or_defer(evi_id, Deferred::ApplyPolicy(rp_id));
        Ok(())
    }

    fn push_policy(&mut self, evi_id: EviId, rp_id: RpId) {
        let t = self.tables.read().unwrap();
        let Some(e) = t.evis.get(&evi_id) else { return };
        // A later association may have replaced this one while it waited.
        if e.record.rp_id != Some(rp_id) {
            return;
        }
        if e.applied_rp_id == Some(rp_id) && e.record.state == EviState::Deployed {
            return;
        }
        let Some(rp) = t.rps.get(&rp_id) else { return };
        let docs: Result<Vec<_>, _> =
            e.record.pe_ids.iter().map(|pe| render_evi_config(&e.record, Some(&rp.policy), pe)).collect();
        drop(t);
        match docs {
            Ok(docs) => self.spawn_txn(evi_id, TxnKind::Associate(rp_id), docs),
            Err(e) => warn!(evi_id, "rendering policy config failed: {e}"),
        }
    }

    fn delete(&mut self, evi_id: EviId) -> Result<(), ServiceError> {
        let docs = {
            let mut t = self.tables();
            let e = t.evis.get_mut(&evi_id).ok_or_else(|| ServiceError::NotFound(format!("l2vpn {evi_id}")))?;
            match e.record.state {
                EviState::Pending => {
                    return Err(ServiceError::Conflict(format!("EVI {evi_id} is still being deployed")))
                }
                EviState::Deleting => {
                    return Err(ServiceError::Conflict(format!("EVI {evi_id} is already being deleted")))
                }
                _ if self.busy.contains_key(&evi_id) => {
                    return Err(ServiceError::Conflict(format!("EVI {evi_id} has a transaction in flight")))
                }
                _ => {}
            }
            e.record.state = EviState::Deleting;
            e.record
                .pe_ids
                .iter()
                .map(|pe| render_evi_delete(&e.record, pe))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ServiceError::Transaction(e.to_string()))?
        };
        self.reevaluate(evi_id);
        self.spawn_txn(evi_id, TxnKind::Delete, docs);
        Ok(())
    }

    fn spawn_txn(&mut self, evi_id: EviId, kind: TxnKind, docs: Vec<crate::peconf::ConfigDocument>) {
        self.busy.entry(evi_id).or_default();
        let conf = self.configurator.clone();
        let bus = self.bus.clone();
        tokio::spawn(async move {
            let result = conf.push_transaction(docs).await.map_err(|e| e.to_string());
            bus.send(Event::TxnDone { evi_id, kind, result });
        });
    }

    fn txn_done(&mut self, evi_id: EviId, kind: TxnKind, result: Result<TxnReport, String>) {
        let (committed, reason, took) = match &result {
            Ok(r) if r.committed() => (true, None, ms(r.total)),
            Ok(r) => (false, r.reason.clone(), ms(r.total)),
            Err(e) => (false, Some(e.clone()), 0.0),
        };
        if !committed {
            self.stats.txn_failures.fetch_add(1, Ordering::Relaxed);
        }
        if let Ok(r) = &result {
            let bad = r.inconsistent_pes();
            if !bad.is_empty() {
                warn!(evi_id, pes = ?bad, "transaction rolled back after partial commit");
            }
        }
        match kind {
            TxnKind::Delete => {
                let reply = self.delete_replies.remove(&evi_id);
                let outcome = if committed {
                    self.forget_evi(evi_id);
                    Ok(())
                } else {
                    let reason = reason.unwrap_or_default();
                    if let Some(e) = self.tables().evis.get_mut(&evi_id) {
                        e.record.state = EviState::Failed;
                        e.failure = Some(reason.clone());
                    }
                    Err(ServiceError::Transaction(reason))
                };
                if let Some(r) = reply {
                    let _ = r.send(outcome);
                }
                self.busy.remove(&evi_id);
                return;
            }
            TxnKind::Create => {
                self.inflight_creates.retain(|_, e| *e != evi_id);
            }
            TxnKind::Associate(_) => {}
        }
        {
            let mut t = self.tables();
            let Some(e) = t.evis.get_mut(&evi_id) else { return };
            e.timing.netconf_ms += took;
            if committed {
                e.record.state = EviState::Deployed;
                e.failure = None;
                if let TxnKind::Associate(rp_id) = kind {
                    e.applied_rp_id = Some(rp_id);
                    e.timing.total_ms = Some(ms(e.received_at.elapsed()));
                }
            } else {
                e.record.state = EviState::Failed;
                e.failure = reason;
            }
        }
        if committed {
            self.refresh_imports(evi_id);
        }
        self.reevaluate(evi_id);
        self.drain_deferred(evi_id);
    }

    fn drain_deferred(&mut self, evi_id: EviId) {
        let mut queue = self.busy.remove(&evi_id).unwrap_or_default();
        while let Some(work) = queue.pop_front() {
            self.apply(evi_id, work);
            if let Some(q) = self.busy.get_mut(&evi_id) {
                q.extend(queue.drain(..));
                break;
            }
        }
    }

    fn forget_evi(&mut self, evi_id: EviId) {
        self.tables().remove_evi(evi_id);
        self.labels.release(evi_id);
        self.adj_out.remove(&evi_id);
        for set in self.import_index.values_mut() {
            set.remove(&evi_id);
        }
        self.import_index.retain(|_, s| !s.is_empty());
        for set in self.remote_index.values_mut() {
            set.remove(&evi_id);
        }
        self.remote_index.retain(|_, s| !s.is_empty());
    }

    /// Import set of an EVI: its own RT plus the applied policy's import RTs.
    fn refresh_imports(&mut self, evi_id: EviId) {
        let rts: BTreeSet<RouteTarget> = {
            let t = self.tables.read().unwrap();
            let Some(e) = t.evis.get(&evi_id) else { return };
            let mut rts = BTreeSet::from([e.record.rt]);
            if let Some(rp) = e.applied_rp_id.and_then(|id| t.rps.get(&id)) {
                rts.extend(rp.policy.import_rts.iter().copied());
            }
            rts
        };
        for (rt, set) in self.import_index.iter_mut() {
            if !rts.contains(rt) {
                set.remove(&evi_id);
            }
        }
        for rt in rts {
            self.import_index.entry(rt).or_default().insert(evi_id);
        }
        self.import_index.retain(|_, s| !s.is_empty());
    }

    fn evi_attrs(&self, t: &Tables, e: &EviEntry) -> Arc<PathAttributes> {
        let mut rts = BTreeSet::from([e.record.rt]);
        if let Some(rp) = e.applied_rp_id.and_then(|id| t.rps.get(&id)) {
            rts.extend(rp.policy.export_rts.iter().copied());
        }
        Arc::new(PathAttributes::with_route_targets(self.cfg.router_id, rts))
    }

    /// Routes this EVI should currently be advertising.
    fn desired(&self, evi_id: EviId) -> BTreeMap<EvpnRoute, (EvpnRoute, Arc<PathAttributes>)> {
        let t = self.tables.read().unwrap();
        let mut out = BTreeMap::new();
        let Some(e) = t.evis.get(&evi_id) else { return out };
        if e.record.state != EviState::Deployed {
            return out;
        }
        let attrs = self.evi_attrs(&t, e);
        let imet = EvpnRoute::InclusiveMulticast {
            rd: e.record.rd,
            eth_tag: e.record.vni,
            originating_ip: self.cfg.router_id.into(),
        };
        out.insert(imet.key(), (imet, attrs.clone()));
        let policy = e.applied_rp_id.and_then(|id| t.rps.get(&id)).map(|r| &r.policy);
        if let Some(p) = policy.filter(|p| p.allow_mac_advertisement) {
            let mut locals: Vec<_> =
                t.macs_of(evi_id).filter(|m| m.origin == crate::model::Origin::Local).collect();
            locals.sort_by_key(|m| (m.learned_at, m.mac));
            let limit = p.max_mac_routes.map_or(usize::MAX, |m| m as usize);
            for m in locals.into_iter().take(limit) {
                let r = EvpnRoute::MacIp {
                    rd: e.record.rd,
                    esi: EthernetSegmentId::ZERO,
                    eth_tag: 0,
                    mac: m.mac,
                    ip: m.ip,
                    labels: vec![e.record.mpls_label],
                };
                out.insert(r.key(), (r, attrs.clone()));
            }
        }
        out
    }

    /// Brings the advertised routes of an EVI in line with its state.
    fn reevaluate(&mut self, evi_id: EviId) {
        let desired = self.desired(evi_id);
        let current = self.adj_out.remove(&evi_id).unwrap_or_default();
        for (k, (route, _)) in &current {
            if !desired.contains_key(k) {
                self.stats.withdrawals.fetch_add(1, Ordering::Relaxed);
                self.out.send(Outbound::Withdraw { target: Target::All, route: route.clone() });
            }
        }
        for (k, (route, attrs)) in &desired {
            let unchanged = current.get(k).is_some_and(|(r, a)| r == route && a == attrs);
            if !unchanged {
                self.stats.advertisements.fetch_add(1, Ordering::Relaxed);
                self.out.send(Outbound::Advertise {
                    target: Target::All,
                    route: route.clone(),
                    attrs: attrs.clone(),
                });
            }
        }
        if !desired.is_empty() {
            self.adj_out.insert(evi_id, desired);
        }
    }

    fn peer_up(&mut self, peer: &str) {
        for routes in self.adj_out.values() {
            for (route, attrs) in routes.values() {
                self.out.send(Outbound::Advertise {
                    target: Target::Peer(peer.to_string()),
                    route: route.clone(),
                    attrs: attrs.clone(),
                });
            }
        }
    }

    /// The neighbor's routes die with its session.
    fn peer_down(&mut self, peer: &str) {
        let keys: Vec<_> = self.remote_index.keys().filter(|(p, _)| p == peer).cloned().collect();
        for k in keys {
            let evis = self.remote_index.remove(&k).unwrap_or_default();
            self.unapply_remote(peer, &k.1, &evis);
        }
    }

    fn remote_update(&mut self, peer: &str, update: ParsedUpdate) {
        for w in &update.withdrawn {
            let key = w.key();
            if let Some(evis) = self.remote_index.remove(&(peer.to_string(), key.clone())) {
                self.unapply_remote(peer, &key, &evis);
            }
        }
        let Some(attrs) = update.attrs else { return };
        let matched: BTreeSet<EviId> = attrs
            .route_targets()
            .filter_map(|rt| self.import_index.get(&rt))
            .flatten()
            .copied()
            .collect();
        for route in update.advertised {
            let key = route.key();
            let index_key = (peer.to_string(), key.clone());
            let old = self.remote_index.remove(&index_key).unwrap_or_default();
            let stale: BTreeSet<_> = old.difference(&matched).copied().collect();
            if !stale.is_empty() {
                self.unapply_remote(peer, &key, &stale);
            }
            if matched.is_empty() {
                self.stats.filtered.fetch_add(1, Ordering::Relaxed);
                if let Some(p) = self.speaker_peer(peer) {
                    p.counters().filtered.fetch_add(1, Ordering::Relaxed);
                }
                continue;
            }
            let applied = self.apply_remote(peer, &route, &matched);
            if self.cfg.reflect {
                self.reflect(peer, &route, &matched);
            }
            if !applied.is_empty() {
                self.remote_index.insert(index_key, applied);
            }
        }
    }

    fn speaker_peer(&self, peer: &str) -> Option<Arc<crate::bgp::session::Peer>> {
        self.speaker.get()?.peer(peer)
    }

    fn apply_remote(&mut self, peer: &str, route: &EvpnRoute, evis: &BTreeSet<EviId>) -> BTreeSet<EviId> {
        let now = Instant::now();
        let mut applied = BTreeSet::new();
        let mut t = self.tables.write().unwrap();
        for &evi in evis {
            if !t.evis.contains_key(&evi) {
                continue;
            }
            match route {
                EvpnRoute::MacIp { esi, mac, ip, labels, .. } => {
                    let Some(label) = labels.first() else { continue };
                    match t.upsert_remote(*mac, *ip, evi, *label, *esi, peer, now) {
                        RemoteUpsert::Applied => {
                            applied.insert(evi);
                        }
                        RemoteUpsert::LocalWins => {
                            self.stats.local_wins.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                EvpnRoute::InclusiveMulticast { .. } => {
                    t.imet_add(evi, peer, route.key());
                    applied.insert(evi);
                }
                EvpnRoute::EthernetAd { .. } | EvpnRoute::EthernetSegment { .. } => {
                    t.esi_add(peer, route.clone());
                    applied.insert(evi);
                }
            }
        }
        applied
    }

    fn unapply_remote(&mut self, peer: &str, key: &EvpnRoute, evis: &BTreeSet<EviId>) {
        let mut t = self.tables.write().unwrap();
        for &evi in evis {
            match key {
                EvpnRoute::MacIp { mac, .. } => {
                    t.remove_remote_path(*mac, evi, peer);
                }
                EvpnRoute::InclusiveMulticast { .. } => t.imet_remove(evi, peer, key),
                EvpnRoute::EthernetAd { .. } | EvpnRoute::EthernetSegment { .. } => {
                    t.esi_remove(peer, key)
                }
            }
        }
    }

    /// Reflect mode: answer a MAC/IP route with the EVI's own advertisement
    /// for the same host, sent only to the originating peer.
    fn reflect(&mut self, peer: &str, route: &EvpnRoute, evis: &BTreeSet<EviId>) {
        let EvpnRoute::MacIp { mac, ip, .. } = route else { return };
        let t = self.tables.read().unwrap();
        let Some(e) = evis.iter().find_map(|id| t.evis.get(id)) else { return };
        let reply = EvpnRoute::MacIp {
            rd: e.record.rd,
            esi: EthernetSegmentId::ZERO,
            eth_tag: 0,
            mac: *mac,
            ip: *ip,
            labels: vec![e.record.mpls_label],
        };
        let attrs = self.evi_attrs(&t, e);
        drop(t);
        self.out.send(Outbound::Advertise { target: Target::Peer(peer.to_string()), route: reply, attrs });
    }
}

/// Hands outbound routes to the BGP sessions, stamping the bus hop.
async fn dispatch(
    mut rx: BusReceiver<Outbound>,
    speaker: Arc<std::sync::OnceLock<Arc<Speaker>>>,
    tracer: Option<Arc<WbtTracer>>,
    stats: Arc<ServiceStats>,
) {
    while let Some(d) = rx.recv().await {
        let Some(speaker) = speaker.get() else { continue };
        let (target, route, attrs) = match d.payload {
            Outbound::Advertise { target, route, attrs } => (target, route, Some(attrs)),
            Outbound::Withdraw { target, route } => (target, route, None),
        };
        if let (Some(t), Some(mac), Some(_)) = (&tracer, route.mac(), &attrs) {
            t.mark_bus_out(mac, d.enqueued_at, d.dequeued_at);
        }
        let peers = match &target {
            Target::All => speaker.established_peers(),
            Target::Peer(id) => speaker.peer(id).into_iter().collect(),
        };
        for p in peers {
            loop {
                if p.state() != SessionState::Established {
                    break;
                }
                let r = match &attrs {
                    Some(a) => p.enqueue_advertisement(&route, a.clone()),
                    None => p.enqueue_withdrawal(&route),
                };
                match r {
                    Err(QueueError::Backpressure(_)) => {
                        stats.backpressure_waits.fetch_add(1, Ordering::Relaxed);
                        tokio::time::sleep(Duration::from_millis(1)).await;
                    }
                    Err(e) => {
                        debug!(peer = p.id(), "route not queued: {e}");
                        break;
                    }
                    Ok(()) => break,
                }
            }
        }
    }
}
