// SPDX-License-Identifier: Apache-2.0

//! BGP speaker: TCP peering sessions with the EVPN multiprotocol capability.
//!
//! A session moves Idle -> Connect -> OpenSent -> Established. The speaker
//! owns one [`Peer`] per neighbor; the peer's output queue survives session
//! resets, and UPDATEs are only ever written while Established.

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tracing::{debug, info, warn};

use super::message::{
    keepalive, notify, read_message, split_header, Notification, OpenMessage, MSG_KEEPALIVE,
    MSG_NOTIFICATION, MSG_OPEN, MSG_UPDATE,
};
use super::queue::{FlushPolicy, OutQueue, QueueError};
use super::update::{parse_update, ParsedUpdate, PathAttributes};
use super::{CodecError, EvpnRoute};
use crate::trace::WbtTracer;

pub type PeerId = String;
pub type PeerHandle = Arc<Peer>;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const OPEN_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Connect,
    OpenSent,
    Established,
}

#[derive(Debug, Clone)]
pub struct SpeakerConfig {
    pub local_asn: u16,
    pub router_id: Ipv4Addr,
    /// Proposed hold time in seconds; 0 disables keepalives and the hold timer.
    pub hold_time: u16,
    pub connect_retry: Duration,
    pub connect_retry_cap: Duration,
    pub flush: FlushPolicy,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self {
            local_asn: 64512,
            router_id: Ipv4Addr::LOCALHOST,
            hold_time: 90,
            connect_retry: Duration::from_secs(1),
            connect_retry_cap: Duration::from_secs(32),
            flush: FlushPolicy::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer sent NOTIFICATION {code}/{subcode}")]
    Notification { code: u8, subcode: u8 },
    #[error("hold timer expired")]
    HoldTimerExpired,
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("speaker shut down")]
    Shutdown,
}

#[derive(Debug, Default)]
pub struct SessionCounters {
    pub parsed_updates: AtomicU64,
    pub parsed_routes: AtomicU64,
    pub serialized_routes: AtomicU64,
    pub updates_sent: AtomicU64,
    pub filtered: AtomicU64,
    pub malformed: AtomicU64,
    pub skipped_unknown: AtomicU64,
    pub write_backoffs: AtomicU64,
    pub sessions_established: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub parsed_updates: u64,
    pub parsed_routes: u64,
    pub serialized_routes: u64,
    pub updates_sent: u64,
    pub filtered: u64,
    pub malformed: u64,
    pub skipped_unknown: u64,
    pub write_backoffs: u64,
    pub sessions_established: u64,
}

impl SessionCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CounterSnapshot {
            parsed_updates: g(&self.parsed_updates),
            parsed_routes: g(&self.parsed_routes),
            serialized_routes: g(&self.serialized_routes),
            updates_sent: g(&self.updates_sent),
            filtered: g(&self.filtered),
            malformed: g(&self.malformed),
            skipped_unknown: g(&self.skipped_unknown),
            write_backoffs: g(&self.write_backoffs),
            sessions_established: g(&self.sessions_established),
        }
    }

    fn add(a: &AtomicU64, n: u64) {
        a.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub enum PeerEvent {
    Up {
        peer: PeerId,
    },
    Down {
        peer: PeerId,
        reason: String,
    },
    Update {
        peer: PeerId,
        update: ParsedUpdate,
        parse_started: Instant,
        parse_done: Instant,
    },
}

/// Receives session events. Implementations must not block.
pub trait PeerEventSink: Send + Sync + 'static {
    fn deliver(&self, event: PeerEvent);
}

impl PeerEventSink for mpsc::UnboundedSender<PeerEvent> {
    fn deliver(&self, event: PeerEvent) {
        let _ = self.send(event);
    }
}

/// One BGP neighbor: session state, output queue and counters.
#[derive(Debug)]
pub struct Peer {
    id: PeerId,
    state: watch::Sender<SessionState>,
    queue: OutQueue,
    counters: SessionCounters,
    tracer: Option<Arc<WbtTracer>>,
}

impl Peer {
    fn new(id: PeerId, flush: FlushPolicy, tracer: Option<Arc<WbtTracer>>) -> Self {
        Self {
            id,
            state: watch::channel(SessionState::Idle).0,
            queue: OutQueue::new(flush),
            counters: SessionCounters::default(),
            tracer,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> SessionState {
        *self.state.borrow()
    }

    fn set_state(&self, s: SessionState) {
        self.state.send_replace(s);
    }

    /// Waits until the session reaches `target`; false on timeout.
    pub async fn wait_for(&self, target: SessionState, timeout: Duration) -> bool {
        let mut rx = self.state.subscribe();
        let ok = tokio::time::timeout(timeout, rx.wait_for(|s| *s == target)).await;
        matches!(ok, Ok(Ok(_)))
    }

    pub fn counters(&self) -> &SessionCounters {
        &self.counters
    }

    pub fn queue(&self) -> &OutQueue {
        &self.queue
    }

    /// Queues a route for coalesced transmission; held until Established.
    pub fn enqueue_advertisement(
        &self,
        route: &EvpnRoute,
        attrs: Arc<PathAttributes>,
    ) -> Result<(), QueueError> {
        self.queue.enqueue_advertisement(route, attrs)?;
        if let (Some(t), Some(mac)) = (&self.tracer, route.mac()) {
            t.mark_serialized(mac, Instant::now());
        }
        Ok(())
    }

    pub fn enqueue_withdrawal(&self, route: &EvpnRoute) -> Result<(), QueueError> {
        self.queue.enqueue_withdrawal(route)
    }
}

/// Runs the OPEN/KEEPALIVE exchange on a fresh connection and returns the
/// peer's OPEN.
pub async fn handshake(
    stream: &mut TcpStream,
    local: &OpenMessage,
    timeout: Duration,
) -> Result<OpenMessage, SessionError> {
    use tokio::io::AsyncWriteExt;
    stream.write_all(&local.to_bytes()).await?;
    let msg = tokio::time::timeout(timeout, read_message(stream))
        .await.map_err(|_| SessionError::Handshake("no OPEN".into()))??;
    let (ty, body) = split_header(&msg)?;
    match ty {
        MSG_OPEN => {}
        MSG_NOTIFICATION => {
            let n = Notification::parse(body)?;
            return Err(SessionError::Notification { code: n.code, subcode: n.subcode });
        }
        other => return Err(SessionError::Handshake(format!("expected OPEN, got type {other}"))),
    }
    let remote = OpenMessage::parse(body)?;
    if remote.version != 4 {
        stream.write_all(&Notification::new(notify::OPEN_MESSAGE_ERROR, 1).to_bytes()).await?;
        return Err(SessionError::Handshake(format!("BGP version {}", remote.version)));
    }
    if !remote.supports_evpn() {
        let n = Notification::new(notify::OPEN_MESSAGE_ERROR, notify::OPEN_UNSUPPORTED_CAPABILITY);
        stream.write_all(&n.to_bytes()).await?;
        return Err(SessionError::Handshake("peer lacks the EVPN capability".into()));
    }
    stream.write_all(&keepalive()).await?;
    let msg = tokio::time::timeout(timeout, read_message(stream))
        .await
        .map_err(|_| SessionError::Handshake("no KEEPALIVE".into()))??;
    let (ty, body) = split_header(&msg)?;
    match ty {
        MSG_KEEPALIVE => Ok(remote),
        MSG_NOTIFICATION => {
            let n = Notification::parse(body)?;
            Err(SessionError::Notification { code: n.code, subcode: n.subcode })
        }
        other => Err(SessionError::Handshake(format!("expected KEEPALIVE, got type {other}"))),
    }
}

/// Writes one message, backing off while the socket would block.
async fn write_msg(
    w: &tokio::sync::Mutex<OwnedWriteHalf>,
    buf: &[u8],
    counters: &SessionCounters,
) -> std::io::Result<()> {
    let w = w.lock().await;
    let mut off = 0;
    let mut backoff = Duration::from_micros(100);
    while off < buf.len() {
        w.writable().await?;
        match w.try_write(&buf[off..]) {
            Ok(0) => return Err(std::io::ErrorKind::WriteZero.into()),
            Ok(n) => off += n,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                SessionCounters::add(&counters.write_backoffs, 1);
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(Duration::from_millis(10));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

pub struct Speaker {
    config: SpeakerConfig,
    sink: Arc<dyn PeerEventSink>,
    peers: Mutex<HashMap<PeerId, Arc<Peer>>>,
    tracer: Option<Arc<WbtTracer>>,
    shutdown: watch::Sender<bool>,
}

impl std::fmt::Debug for Speaker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Speaker").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Speaker {
    pub fn new(
        config: SpeakerConfig,
        sink: Arc<dyn PeerEventSink>,
        tracer: Option<Arc<WbtTracer>>,
    ) -> Arc<Self> {
        Arc::new(Self {
            config,
            sink,
            peers: Mutex::default(),
            tracer,
            shutdown: watch::channel(false).0,
        })
    }

    pub fn config(&self) -> &SpeakerConfig {
        &self.config
    }

    fn peer_entry(&self, id: &str) -> Arc<Peer> {
        self.peers
            .lock()
            .unwrap()
            .entry(id.to_string())
            .or_insert_with(|| {
                Arc::new(Peer::new(id.to_string(), self.config.flush, self.tracer.clone()))
            })
            .clone()
    }

    pub fn peer(&self, id: &str) -> Option<Arc<Peer>> {
        self.peers.lock().unwrap().get(id).cloned()
    }

    pub fn peers(&self) -> Vec<Arc<Peer>> {
        let mut v: Vec<_> = self.peers.lock().unwrap().values().cloned().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    pub fn established_peers(&self) -> Vec<Arc<Peer>> {
        self.peers().into_iter().filter(|p| p.state() == SessionState::Established).collect()
    }

    /// Starts an active session to `addr`, reconnecting with exponential
    /// backoff whenever it drops.
    pub fn connect(self: &Arc<Self>, id: impl Into<PeerId>, addr: SocketAddr) -> Arc<Peer> {
        let peer = self.peer_entry(&id.into());
        let me = self.clone();
        let p = peer.clone();
        tokio::spawn(async move { me.active_loop(p, addr).await });
        peer
    }

    /// Accepts passive sessions; each peer is named by its BGP identifier.
    pub fn listen(self: &Arc<Self>, listener: TcpListener) {
        let me = self.clone();
        let mut stop = self.shutdown.subscribe();
        tokio::spawn(async move {
            loop {
                let accepted = tokio::select! {
                    a = listener.accept() => a,
                    _ = stop.changed() => return,
                };
                match accepted {
                    Ok((stream, remote)) => {
                        debug!(%remote, "accepted BGP connection");
                        let me = me.clone();
                        tokio::spawn(async move {
                            let _ = me.run_session(stream, None).await;
                        });
                    }
                    Err(e) => warn!("BGP accept failed: {e}"),
                }
            }
        });
    }

    pub fn shutdown(&self) {
        self.shutdown.send_replace(true);
    }

    async fn active_loop(self: Arc<Self>, peer: Arc<Peer>, addr: SocketAddr) {
        let mut stop = self.shutdown.subscribe();
        let mut backoff = self.config.connect_retry;
        loop {
            if *stop.borrow() {
                return;
            }
            peer.set_state(SessionState::Connect);
            if let Ok(Ok(stream)) =
                tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr)).await
            {
                if self.run_session(stream, Some(peer.clone())).await {
                    backoff = self.config.connect_retry;
                }
            }
            peer.set_state(SessionState::Idle);
            tokio::select! {
                _ = tokio::time::sleep(backoff) => {}
                _ = stop.changed() => return,
            }
            backoff = (backoff * 2).min(self.config.connect_retry_cap);
        }
    }

    /// Drives one TCP connection to completion. Returns whether the session
    /// reached Established.
    async fn run_session(self: &Arc<Self>, mut stream: TcpStream, known: Option<Arc<Peer>>) -> bool {
        let _ = stream.set_nodelay(true);
        if let Some(p) = &known {
            p.set_state(SessionState::OpenSent);
        }
        let local = OpenMessage::evpn(
            self.config.local_asn,
            self.config.hold_time,
            self.config.router_id,
        );
        let remote = match handshake(&mut stream, &local, OPEN_TIMEOUT).await {
            Ok(r) => r,
            Err(e) => {
                debug!("BGP handshake failed: {e}");
                return false;
            }
        };
        let peer = known.unwrap_or_else(|| self.peer_entry(&remote.bgp_id.to_string()));
        let hold = self.config.hold_time.min(remote.hold_time);
        let hold = (hold > 0).then(|| Duration::from_secs(u64::from(hold)));

        peer.set_state(SessionState::Established);
        SessionCounters::add(&peer.counters.sessions_established, 1);
        info!(peer = %peer.id, "BGP session established");
        self.sink.deliver(PeerEvent::Up { peer: peer.id.clone() });

        let (mut rd, wr) = stream.into_split();
        let wr = Arc::new(tokio::sync::Mutex::new(wr));
        let (stop_tx, stop_rx) = watch::channel(false);
        let writer = tokio::spawn(write_loop(peer.clone(), wr.clone(), hold.map(|h| h / 3), stop_rx));

        let mut shutdown = self.shutdown.subscribe();
        let reason = loop {
            let read = async {
                match hold {
                    Some(h) => tokio::time::timeout(h, read_message(&mut rd))
                        .await
                        .map_err(|_| SessionError::HoldTimerExpired)?
                        .map_err(SessionError::from),
                    None => read_message(&mut rd).await.map_err(SessionError::from),
                }
            };
            let msg = tokio::select! {
                m = read => m,
                _ = shutdown.changed() => Err(SessionError::Shutdown),
            };
            let msg = match msg {
                Ok(m) => m,
                Err(SessionError::HoldTimerExpired) => {
                    let n = Notification::new(notify::HOLD_TIMER_EXPIRED, 0);
                    let _ = write_msg(&wr, &n.to_bytes(), &peer.counters).await;
                    break SessionError::HoldTimerExpired;
                }
                Err(SessionError::Shutdown) => {
                    let n = Notification::new(notify::CEASE, 0);
                    let _ = write_msg(&wr, &n.to_bytes(), &peer.counters).await;
                    break SessionError::Shutdown;
                }
                Err(e) => break e,
            };
            let parse_started = Instant::now();
            let (ty, body) = match split_header(&msg) {
                Ok(x) => x,
                Err(e) => break e.into(),
            };
            match ty {
                MSG_UPDATE => match parse_update(&msg) {
                    Ok(update) => {
                        let parse_done = Instant::now();
                        let c = &peer.counters;
                        SessionCounters::add(&c.parsed_updates, 1);
                        SessionCounters::add(&c.parsed_routes, update.advertised.len() as u64);
                        SessionCounters::add(&c.skipped_unknown, update.skipped_unknown as u64);
                        if let Some(t) = &self.tracer {
                            for mac in update.advertised.iter().filter_map(EvpnRoute::mac) {
                                t.mark_parsed(mac, parse_started, parse_done);
                            }
                        }
                        self.sink.deliver(PeerEvent::Update {
                            peer: peer.id.clone(),
                            update,
                            parse_started,
                            parse_done,
                        });
                    }
                    Err(e) => {
                        SessionCounters::add(&peer.counters.malformed, 1);
                        warn!(peer = %peer.id, "malformed UPDATE, resetting session: {e}");
                        let n = Notification::new(
                            notify::UPDATE_MESSAGE_ERROR,
                            notify::UPDATE_MALFORMED_ATTRIBUTE_LIST,
                        );
                        let _ = write_msg(&wr, &n.to_bytes(), &peer.counters).await;
                        break e.into();
                    }
                },
                MSG_KEEPALIVE => {}
                MSG_NOTIFICATION => {
                    let n = Notification::parse(body).unwrap_or(Notification::new(0, 0));
                    break SessionError::Notification { code: n.code, subcode: n.subcode };
                }
                other => {
                    let n = Notification::new(notify::FSM_ERROR, 0);
                    let _ = write_msg(&wr, &n.to_bytes(), &peer.counters).await;
                    break SessionError::Handshake(format!("unexpected message type {other}"));
                }
            }
        };

        let _ = stop_tx.send(true);
        let _ = writer.await;
        peer.set_state(SessionState::Idle);
        // The neighbor drops everything learned from us with the session; the
        // owner re-sends its table on the next Up.
        peer.queue.drain_all();
        info!(peer = %peer.id, "BGP session down: {reason}");
        self.sink.deliver(PeerEvent::Down { peer: peer.id.clone(), reason: reason.to_string() });
        true
    }
}

async fn write_loop(
    peer: Arc<Peer>,
    wr: Arc<tokio::sync::Mutex<OwnedWriteHalf>>,
    keepalive_every: Option<Duration>,
    mut stop: watch::Receiver<bool>,
) {
    let far = Duration::from_secs(3600);
    let mut ka = tokio::time::interval_at(
        tokio::time::Instant::now() + keepalive_every.unwrap_or(far),
        keepalive_every.unwrap_or(far),
    );
    loop {
        let flush = peer.queue.poll_flush(Instant::now());
        if !flush.messages.is_empty() {
            assert_eq!(peer.state(), SessionState::Established, "UPDATE outside Established");
            for m in &flush.messages {
                if write_msg(&wr, m, &peer.counters).await.is_err() {
                    return;
                }
            }
            SessionCounters::add(&peer.counters.updates_sent, flush.messages.len() as u64);
            SessionCounters::add(&peer.counters.serialized_routes, flush.routes as u64);
        }
        let deadline = flush
            .next_deadline
            .map(tokio::time::Instant::from_std)
            .unwrap_or_else(|| tokio::time::Instant::now() + far);
        tokio::select! {
            _ = peer.queue.notified() => {}
            _ = tokio::time::sleep_until(deadline) => {}
            _ = ka.tick(), if keepalive_every.is_some() => {
                if write_msg(&wr, &keepalive(), &peer.counters).await.is_err() {
                    return;
                }
            }
            _ = stop.changed() => return,
        }
    }
}
