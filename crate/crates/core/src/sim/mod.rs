// SPDX-License-Identifier: Apache-2.0

//! Simulated provider-edge router: NETCONF-lite server over candidate and
//! running datastores, a passive BGP EVPN peer, and a line-delimited JSON
//! control channel for test drivers.

pub mod datastore;

use std::collections::{BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tracing::{debug, warn};

use crate::bgp::session::PeerEvent;
use crate::bgp::{EvpnRoute, PathAttributes, SessionState, Speaker, SpeakerConfig};
use crate::model::{RouteDistinguisher, RouteTarget};
use crate::netconf::{
    error_tag, hello, hello_has_capability, Element, Framed, Operation, Reply,
};
pub use datastore::{evi_ids, Datastore};

/// Per-operation response delay: fixed part plus uniform jitter in
/// `[0, jitter_ms]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimLatencyProfile {
    pub edit_ms: f64,
    pub validate_ms: f64,
    pub commit_ms: f64,
    pub jitter_ms: f64,
}

impl SimLatencyProfile {
    pub fn new(edit_ms: f64, validate_ms: f64, commit_ms: f64) -> Self {
        Self { edit_ms, validate_ms, commit_ms, jitter_ms: 0.0 }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: Self = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        if [p.edit_ms, p.validate_ms, p.commit_ms, p.jitter_ms].iter().any(|v| !(*v >= 0.0)) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "latencies must be non-negative",
            ));
        }
        Ok(p)
    }

    fn delay_for(&self, op: &Operation) -> Duration {
        let fixed = match op {
            Operation::EditConfig(_) => self.edit_ms,
            Operation::Validate => self.validate_ms,
            Operation::Commit => self.commit_ms,
            _ => return Duration::ZERO,
        };
        let jitter = if self.jitter_ms > 0.0 {
            rand::thread_rng().gen_range(0.0..=self.jitter_ms)
        } else {
            0.0
        };
        Duration::from_secs_f64((fixed + jitter).max(0.0) / 1e3)
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub id: String,
    pub asn: u16,
    pub router_id: Ipv4Addr,
    pub listen_ip: IpAddr,
    /// Ports; 0 picks an ephemeral port.
    pub netconf_port: u16,
    pub bgp_port: u16,
    pub control_port: u16,
    pub latency: SimLatencyProfile,
    pub reflect: bool,
    pub hold_time: u16,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            id: "pe1".into(),
            asn: 65001,
            router_id: Ipv4Addr::new(10, 255, 0, 1),
            listen_ip: Ipv4Addr::LOCALHOST.into(),
            netconf_port: 0,
            bgp_port: 0,
            control_port: 0,
            latency: SimLatencyProfile::default(),
            reflect: false,
            hold_time: 90,
        }
    }
}

/// One entry of the received-route log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceivedRoute {
    pub peer: String,
    pub route: EvpnRoute,
    pub withdrawn: bool,
    pub attrs: Option<PathAttributes>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum ControlRequest {
    StageRoute { route: EvpnRoute, route_targets: Vec<RouteTarget> },
    WithdrawRoute { route: EvpnRoute },
    SetLatency { profile: SimLatencyProfile },
    FailNextValidate,
    SetReflect { enabled: bool },
    ReceivedRoutes,
    GetRunning,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ControlResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received_routes: Option<Vec<ReceivedRoute>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running: Option<String>,
}

#[derive(Debug)]
struct SimState {
    id: String,
    asn: u16,
    router_id: Ipv4Addr,
    datastore: Mutex<Datastore>,
    latency: Mutex<SimLatencyProfile>,
    fail_next_validate: AtomicBool,
    reflect: AtomicBool,
    received: Mutex<Vec<ReceivedRoute>>,
    staged: Mutex<Vec<(EvpnRoute, PathAttributes)>>,
    rpc_count: AtomicU64,
}

pub struct PeSimulator {
    state: Arc<SimState>,
    speaker: Arc<Speaker>,
    netconf_addr: SocketAddr,
    bgp_addr: SocketAddr,
    control_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
}

impl std::fmt::Debug for PeSimulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeSimulator").field("id", &self.state.id).finish_non_exhaustive()
    }
}

impl PeSimulator {
    pub async fn start(cfg: SimConfig) -> std::io::Result<Self> {
        let state = Arc::new(SimState {
            id: cfg.id.clone(),
            asn: cfg.asn,
            router_id: cfg.router_id,
            datastore: Mutex::default(),
            latency: Mutex::new(cfg.latency),
            fail_next_validate: AtomicBool::new(false),
            reflect: AtomicBool::new(cfg.reflect),
            received: Mutex::default(),
            staged: Mutex::default(),
            rpc_count: AtomicU64::new(0),
        });
        let (shutdown, _) = watch::channel(false);

        let netconf = TcpListener::bind((cfg.listen_ip, cfg.netconf_port)).await?;
        let bgp = TcpListener::bind((cfg.listen_ip, cfg.bgp_port)).await?;
        let control = TcpListener::bind((cfg.listen_ip, cfg.control_port)).await?;
        let (netconf_addr, bgp_addr, control_addr) =
            (netconf.local_addr()?, bgp.local_addr()?, control.local_addr()?);

        let (tx, rx) = mpsc::unbounded_channel();
        let speaker = Speaker::new(
            SpeakerConfig {
                local_asn: cfg.asn,
                router_id: cfg.router_id,
                hold_time: cfg.hold_time,
                ..SpeakerConfig::default()
            },
            Arc::new(tx),
            None,
        );
        speaker.listen(bgp);

        tokio::spawn(accept_netconf(netconf, state.clone(), shutdown.subscribe()));
        tokio::spawn(bgp_events(rx, state.clone(), speaker.clone()));
        tokio::spawn(accept_control(control, state.clone(), speaker.clone(), shutdown.subscribe()));

        Ok(Self { state, speaker, netconf_addr, bgp_addr, control_addr, shutdown })
    }

    pub fn id(&self) -> &str {
        &self.state.id
    }

    pub fn router_id(&self) -> Ipv4Addr {
        self.state.router_id
    }

    pub fn netconf_addr(&self) -> SocketAddr {
        self.netconf_addr
    }

    pub fn bgp_addr(&self) -> SocketAddr {
        self.bgp_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn speaker(&self) -> &Arc<Speaker> {
        &self.speaker
    }

    pub fn running(&self) -> Element {
        self.state.datastore.lock().unwrap().running().clone()
    }

    pub fn candidate(&self) -> Element {
        self.state.datastore.lock().unwrap().candidate().clone()
    }

    pub fn running_evi_ids(&self) -> BTreeSet<u32> {
        evi_ids(&self.running())
    }

    pub fn rpc_count(&self) -> u64 {
        self.state.rpc_count.load(Ordering::Relaxed)
    }

    pub fn received_routes(&self) -> Vec<ReceivedRoute> {
        self.state.received.lock().unwrap().clone()
    }

    pub fn clear_received(&self) {
        self.state.received.lock().unwrap().clear();
    }

    /// Routes currently advertised to this PE, folded from the log and keyed
    /// by route identity.
    pub fn active_routes(&self) -> HashMap<EvpnRoute, (EvpnRoute, PathAttributes)> {
        fold_active(&self.received_routes())
    }

    pub fn stage_route(&self, route: EvpnRoute, attrs: PathAttributes) {
        stage(&self.state, &self.speaker, route, attrs);
    }

    pub fn withdraw_route(&self, route: &EvpnRoute) {
        unstage(&self.state, &self.speaker, route);
    }

    pub fn set_latency(&self, p: SimLatencyProfile) {
        *self.state.latency.lock().unwrap() = p;
    }

    pub fn fail_next_validate(&self) {
        self.state.fail_next_validate.store(true, Ordering::SeqCst);
    }

    pub fn set_reflect(&self, on: bool) {
        self.state.reflect.store(on, Ordering::SeqCst);
    }

    pub fn bgp_established(&self) -> usize {
        self.speaker.peers().iter().filter(|p| p.state() == SessionState::Established).count()
    }

    /// Stops all listeners and drops open sessions, as if the device died.
    pub fn shutdown(&self) {
        self.shutdown.send_replace(true);
        self.speaker.shutdown();
    }
}

impl Drop for PeSimulator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn fold_active(log: &[ReceivedRoute]) -> HashMap<EvpnRoute, (EvpnRoute, PathAttributes)> {
    let mut active = HashMap::new();
    for r in log {
        if r.withdrawn {
            active.remove(&r.route.key());
        } else if let Some(a) = &r.attrs {
            active.insert(r.route.key(), (r.route.clone(), a.clone()));
        }
    }
    active
}

fn stage(state: &SimState, speaker: &Speaker, route: EvpnRoute, attrs: PathAttributes) {
    let attrs = Arc::new(attrs);
    for p in speaker.established_peers() {
        if let Err(e) = p.enqueue_advertisement(&route, attrs.clone()) {
            warn!(sim = %state.id, "staged route not queued: {e}");
        }
    }
    let mut staged = state.staged.lock().unwrap();
    staged.retain(|(r, _)| r.key() != route.key());
    staged.push((route, (*attrs).clone()));
}

fn unstage(state: &SimState, speaker: &Speaker, route: &EvpnRoute) {
    state.staged.lock().unwrap().retain(|(r, _)| r.key() != route.key());
    for p in speaker.established_peers() {
        let _ = p.enqueue_withdrawal(route);
    }
}

async fn bgp_events(mut rx: mpsc::UnboundedReceiver<PeerEvent>, state: Arc<SimState>, speaker: Arc<Speaker>) {
    while let Some(ev) = rx.recv().await {
        match ev {
            PeerEvent::Up { peer } => {
                let Some(p) = speaker.peer(&peer) else { continue };
                let staged = state.staged.lock().unwrap().clone();
                for (route, attrs) in staged {
                    let _ = p.enqueue_advertisement(&route, Arc::new(attrs));
                }
            }
            PeerEvent::Down { .. } => {}
            PeerEvent::Update { peer, update, .. } => {
                {
                    let mut log = state.received.lock().unwrap();
                    for w in &update.withdrawn {
                        log.push(ReceivedRoute {
                            peer: peer.clone(),
                            route: w.clone(),
                            withdrawn: true,
                            attrs: None,
                        });
                    }
                    for a in &update.advertised {
                        log.push(ReceivedRoute {
                            peer: peer.clone(),
                            route: a.clone(),
                            withdrawn: false,
                            attrs: update.attrs.clone(),
                        });
                    }
                }
                if state.reflect.load(Ordering::Relaxed) {
                    reflect(&state, &speaker, &peer, &update.advertised, update.attrs.as_ref());
                }
            }
        }
    }
}

/// Echoes each received MAC/IP route back to its sender under this PE's RD.
fn reflect(
    state: &SimState,
    speaker: &Speaker,
    peer: &str,
    routes: &[EvpnRoute],
    attrs: Option<&PathAttributes>,
) {
    let (Some(p), Some(attrs)) = (speaker.peer(peer), attrs) else { return };
    let attrs = Arc::new(PathAttributes { next_hop: state.router_id, ..attrs.clone() });
    for r in routes {
        if let EvpnRoute::MacIp { rd, esi, eth_tag, mac, ip, labels } = r {
            let echo = EvpnRoute::MacIp {
                rd: RouteDistinguisher::new(state.asn, rd.assigned_number),
                esi: *esi,
                eth_tag: *eth_tag,
                mac: *mac,
                ip: *ip,
                labels: labels.clone(),
            };
            if let Err(e) = p.enqueue_advertisement(&echo, attrs.clone()) {
                warn!(sim = %state.id, "reflected route dropped: {e}");
            }
        }
    }
}

async fn accept_netconf(listener: TcpListener, state: Arc<SimState>, mut stop: watch::Receiver<bool>) {
    loop {
        let accepted = tokio::select! {
            a = listener.accept() => a,
            _ = stop.changed() => return,
        };
        match accepted {
            Ok((stream, _)) => {
                let state = state.clone();
                let stop = stop.clone();
                tokio::spawn(async move {
                    if let Err(e) = serve_netconf(stream, state, stop).await {
                        debug!("NETCONF session ended: {e}");
                    }
                });
            }
            Err(e) => warn!("NETCONF accept failed: {e}"),
        }
    }
}

async fn serve_netconf(
    stream: TcpStream,
    state: Arc<SimState>,
    mut stop: watch::Receiver<bool>,
) -> Result<(), crate::netconf::NetconfError> {
    stream.set_nodelay(true)?;
    let mut conn = Framed::new(stream);
    conn.write_frame(&hello().to_xml()).await?;
    let first = tokio::select! {
        f = conn.read_frame() => f?,
        _ = stop.changed() => return Ok(()),
    };
    let Some(first) = first else { return Ok(()) };
    match Element::parse(&first) {
        Ok(h) if hello_has_capability(&h) => {}
        _ => {
            let r = Reply::error(error_tag::MALFORMED_MESSAGE, "expected hello with netconf-lite capability");
            conn.write_frame(&r.to_element(None).to_xml()).await?;
            return Ok(());
        }
    }
    loop {
        let frame = tokio::select! {
            f = conn.read_frame() => f?,
            _ = stop.changed() => return Ok(()),
        };
        let Some(frame) = frame else { return Ok(()) };
        state.rpc_count.fetch_add(1, Ordering::Relaxed);
        let (id, reply, close) = match Element::parse(&frame) {
            Err(e) => (None, Reply::error(error_tag::MALFORMED_MESSAGE, &e.to_string()), false),
            Ok(el) => match Operation::from_rpc(&el) {
                Err(reply) => (el.get_attr("message-id").map(str::to_string), reply, false),
                Ok((id, op)) => {
                    let delay = state.latency.lock().unwrap().delay_for(&op);
                    if !delay.is_zero() {
                        tokio::time::sleep(delay).await;
                    }
                    let close = op == Operation::CloseSession;
                    (Some(id), apply(&state, op), close)
                }
            },
        };
        conn.write_frame(&reply.to_element(id.as_deref()).to_xml()).await?;
        if close {
            return Ok(());
        }
    }
}

fn apply(state: &SimState, op: Operation) -> Reply {
    let mut ds = state.datastore.lock().unwrap();
    let failed = |m: String| Reply::error(error_tag::OPERATION_FAILED, &m);
    match op {
        Operation::EditConfig(cfg) => {
            ds.edit(&cfg);
            Reply::Ok
        }
        Operation::Validate => {
            if state.fail_next_validate.swap(false, Ordering::SeqCst) {
                return failed("validation failure injected by test driver".into());
            }
            ds.validate().map_or_else(failed, |()| Reply::Ok)
        }
        Operation::Commit => ds.commit().map_or_else(failed, |()| Reply::Ok),
        Operation::DiscardChanges => {
            ds.discard();
            Reply::Ok
        }
        Operation::GetConfig(source) => Reply::Data(match source {
            crate::netconf::Datastore::Candidate => ds.candidate().clone(),
            crate::netconf::Datastore::Running => ds.running().clone(),
        }),
        Operation::CloseSession => Reply::Ok,
    }
}

async fn accept_control(
    listener: TcpListener,
    state: Arc<SimState>,
    speaker: Arc<Speaker>,
    mut stop: watch::Receiver<bool>,
) {
    loop {
        let accepted = tokio::select! {
            a = listener.accept() => a,
            _ = stop.changed() => return,
        };
        let Ok((stream, _)) = accepted else { continue };
        let (state, speaker, stop) = (state.clone(), speaker.clone(), stop.clone());
        tokio::spawn(async move {
            let _ = serve_control(stream, state, speaker, stop).await;
        });
    }
}

async fn serve_control(
    stream: TcpStream,
    state: Arc<SimState>,
    speaker: Arc<Speaker>,
    mut stop: watch::Receiver<bool>,
) -> std::io::Result<()> {
    let (rd, mut wr) = stream.into_split();
    let mut lines = BufReader::new(rd).lines();
    loop {
        let line = tokio::select! {
            l = lines.next_line() => l?,
            _ = stop.changed() => return Ok(()),
        };
        let Some(line) = line else { return Ok(()) };
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<ControlRequest>(&line) {
            Err(e) => ControlResponse { error: Some(e.to_string()), ..ControlResponse::default() },
            Ok(req) => control(&state, &speaker, req),
        };
        let mut out = serde_json::to_vec(&resp).expect("response serializes");
        out.push(b'\n');
        wr.write_all(&out).await?;
    }
}

fn control(state: &SimState, speaker: &Speaker, req: ControlRequest) -> ControlResponse {
    let ok = ControlResponse { ok: true, ..ControlResponse::default() };
    match req {
        ControlRequest::StageRoute { route, route_targets } => {
            if route_targets.is_empty() {
                return ControlResponse {
                    error: Some("stage_route needs at least one route target".into()),
                    ..ControlResponse::default()
                };
            }
            let attrs = PathAttributes::with_route_targets(state.router_id, route_targets);
            stage(state, speaker, route, attrs);
            ok
        }
        ControlRequest::WithdrawRoute { route } => {
            unstage(state, speaker, &route);
            ok
        }
        ControlRequest::SetLatency { profile } => {
            *state.latency.lock().unwrap() = profile;
            ok
        }
        ControlRequest::FailNextValidate => {
            state.fail_next_validate.store(true, Ordering::SeqCst);
            ok
        }
        ControlRequest::SetReflect { enabled } => {
            state.reflect.store(enabled, Ordering::SeqCst);
            ok
        }
        ControlRequest::ReceivedRoutes => ControlResponse {
            received_routes: Some(state.received.lock().unwrap().clone()),
            ..ok
        },
        ControlRequest::GetRunning => ControlResponse {
            running: Some(state.datastore.lock().unwrap().running().to_xml()),
            ..ok
        },
    }
}

/// Client for a simulator's control channel.
#[derive(Debug)]
pub struct ControlClient {
    lines: tokio::io::Lines<BufReader<tokio::net::tcp::OwnedReadHalf>>,
    wr: tokio::net::tcp::OwnedWriteHalf,
}

impl ControlClient {
    pub async fn connect(addr: SocketAddr) -> std::io::Result<Self> {
        let (rd, wr) = TcpStream::connect(addr).await?.into_split();
        Ok(Self { lines: BufReader::new(rd).lines(), wr })
    }

    pub async fn request(&mut self, req: &ControlRequest) -> std::io::Result<ControlResponse> {
        let mut line = serde_json::to_vec(req).expect("request serializes");
        line.push(b'\n');
        self.wr.write_all(&line).await?;
        let resp = self
            .lines
            .next_line()
            .await?
            .ok_or_else(|| std::io::Error::from(std::io::ErrorKind::UnexpectedEof))?;
        serde_json::from_str(&resp).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
