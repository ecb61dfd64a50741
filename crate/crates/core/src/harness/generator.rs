// SPDX-License-Identifier: Apache-2.0

//! Raw BGP traffic generator measuring controller round-trip times.
//!
//! The generator opens a BGP session to a controller running in reflect
//! mode, sends MAC/IP advertisements with unique MACs and times the reply
//! carrying the same MAC.

use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Mutex};
use tokio::task::JoinHandle;

use crate::bgp::message::{keepalive, read_message, split_header, Notification, OpenMessage, MSG_NOTIFICATION, MSG_UPDATE};
use crate::bgp::session::handshake;
use crate::bgp::{parse_update, serialize_update, EvpnRoute, PathAttributes};
use crate::model::{EthernetSegmentId, MacAddr, MplsLabel, RouteDistinguisher, RouteTarget};

use super::HarnessError;

pub const GENERATOR_WARMUP: usize = 20;
pub const REPLY_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    Burst,
    OneByOne,
    Single,
}

impl GenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GenMode::Burst => "burst",
            GenMode::OneByOne => "one_by_one",
            GenMode::Single => "single",
        }
    }
}

impl FromStr for GenMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "burst" => Ok(GenMode::Burst),
            "one" | "one_by_one" | "one-by-one" => Ok(GenMode::OneByOne),
            "single" => Ok(GenMode::Single),
            _ => Err(format!("unknown mode {s:?} (burst, one, single)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub mode: GenMode,
    pub count: usize,
    pub peer_addr: SocketAddr,
    /// MACs are `mac_seed + i`; warm-up messages come first.
    pub mac_seed: u64,
    /// Route target matching the controller EVI that should import the routes.
    pub route_target: RouteTarget,
    pub asn: u16,
    pub router_id: Ipv4Addr,
    pub warmup: usize,
    pub reply_timeout: Duration,
}

impl GeneratorConfig {
    pub fn new(mode: GenMode, count: usize, peer_addr: SocketAddr, route_target: RouteTarget) -> Self {
        Self {
            mode,
            count,
            peer_addr,
            mac_seed: 0x0a00_0000_0000,
            route_target,
            asn: 65100,
            router_id: Ipv4Addr::new(10, 254, 0, 1),
            warmup: GENERATOR_WARMUP,
            reply_timeout: REPLY_TIMEOUT,
        }
    }

    fn check(&self) -> Result<(), HarnessError> {
        if self.count == 0 {
            return Err(HarnessError::Config("count must be positive".into()));
        }
        if self.mode == GenMode::Single && self.count != 1 {
            return Err(HarnessError::Config("single mode sends exactly one message".into()));
        }
        if self.mac_seed + (self.warmup + self.count) as u64 > 1 << 48 {
            return Err(HarnessError::Config("MAC range exceeds 48 bits".into()));
        }
        Ok(())
    }

    pub fn macs(&self) -> Vec<MacAddr> {
        (0..self.warmup + self.count).map(|i| MacAddr::from_u64(self.mac_seed + i as u64)).collect()
    }

    /// MACs of the measured (non warm-up) messages.
    pub fn measured_macs(&self) -> Vec<MacAddr> {
        self.macs().split_off(self.warmup)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub index: usize,
    pub mac: MacAddr,
    pub rtt_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRun {
    pub mode: GenMode,
    pub samples: Vec<RttSample>,
}

impl GeneratorRun {
    pub fn rtts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.rtt_ms).collect()
    }
}

struct Session {
    writer: Arc<Mutex<OwnedWriteHalf>>,
    replies: mpsc::UnboundedReceiver<Result<(MacAddr, Instant), HarnessError>>,
    received: HashMap<MacAddr, Instant>,
    tasks: Vec<JoinHandle<()>>,
    attrs: PathAttributes,
    rd: RouteDistinguisher,
}

impl Drop for Session {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Session {
    async fn open(cfg: &GeneratorConfig) -> Result<Self, HarnessError> {
        let mut stream = TcpStream::connect(cfg.peer_addr).await?;
        stream.set_nodelay(true)?;
        let open = OpenMessage::evpn(cfg.asn, 90, cfg.router_id);
        let remote = handshake(&mut stream, &open, Duration::from_secs(5))
            .await
            .map_err(|e| HarnessError::Bgp(e.to_string()))?;
        let (mut reader, writer) = stream.into_split();
        let writer = Arc::new(Mutex::new(writer));
        let (tx, replies) = mpsc::unbounded_channel();

        let read_task = tokio::spawn(async move {
            loop {
                let msg = match read_message(&mut reader).await {
                    Ok(m) => m,
                    Err(e) => {
                        let _ = tx.send(Err(HarnessError::Bgp(format!("session closed: {e}"))));
                        return;
                    }
                };
                let at = Instant::now();
                let Ok((ty, body)) = split_header(&msg) else { continue };
                match ty {
                    MSG_UPDATE => {
                        let Ok(u) = parse_update(&msg) else { continue };
                        for mac in u.advertised.iter().filter_map(EvpnRoute::mac) {
                            let _ = tx.send(Ok((mac, at)));
                        }
                    }
                    MSG_NOTIFICATION => {
                        let why = Notification::parse(body)
                            .map(|n| format!("{}/{}", n.code, n.subcode))
                            .unwrap_or_else(|_| "unparsable".into());
                        let _ = tx.send(Err(HarnessError::Bgp(format!("NOTIFICATION {why}"))));
                        return;
                    }
                    _ => {}
                }
            }
        });
        let ka_writer = writer.clone();
        let period = Duration::from_secs(u64::from(remote.hold_time.clamp(3, 90)) / 3);
        let ka_task = tokio::spawn(async move {
            let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
            loop {
                tick.tick().await;
                if ka_writer.lock().await.write_all(&keepalive()).await.is_err() {
                    return;
                }
            }
        });

        Ok(Self {
            writer,
            replies,
            received: HashMap::new(),
            tasks: vec![read_task, ka_task],
            attrs: PathAttributes::with_route_targets(cfg.router_id, [cfg.route_target]),
            rd: RouteDistinguisher::new(cfg.asn, 1),
        })
    }

    fn route(&self, i: usize, mac: MacAddr) -> EvpnRoute {
        EvpnRoute::MacIp {
            rd: self.rd,
            esi: EthernetSegmentId::ZERO,
            eth_tag: 0,
            mac,
            ip: Some(IpAddr::V4(Ipv4Addr::from(0x0a80_0000 + i as u32))),
            labels: vec![MplsLabel::new(MplsLabel::FIRST_UNRESERVED + 100).expect("constant label")],
        }
    }

    async fn send(&self, i: usize, mac: MacAddr) -> Result<Instant, HarnessError> {
        let msg = serialize_update(&[self.route(i, mac)], &self.attrs)
            .map_err(|e| HarnessError::Bgp(e.to_string()))?
            .remove(0);
        let mut w = self.writer.lock().await;
        let at = Instant::now();
        w.write_all(&msg).await?;
        Ok(at)
    }

    /// Waits until replies for all `macs` arrived or the deadline passes.
    async fn await_replies(&mut self, macs: &[MacAddr], timeout: Duration) -> Result<(), HarnessError> {
        let deadline = tokio::time::Instant::now() + timeout;
        while macs.iter().any(|m| !self.received.contains_key(m)) {
            match tokio::time::timeout_at(deadline, self.replies.recv()).await {
                Ok(Some(Ok((mac, at)))) => {
                    self.received.entry(mac).or_insert(at);
                }
                Ok(Some(Err(e))) => return Err(e),
                Ok(None) => return Err(HarnessError::Bgp("reader stopped".into())),
                Err(_) => {
                    let missing = macs.iter().filter(|m| !self.received.contains_key(m)).copied().collect();
                    return Err(HarnessError::MissingReplies(missing));
                }
            }
        }
        Ok(())
    }
}

/// Runs one generator session: warm-up, then the measured messages.
pub async fn run_generator(cfg: &GeneratorConfig) -> Result<GeneratorRun, HarnessError> {
    cfg.check()?;
    let mut s = Session::open(cfg).await?;
    let macs = cfg.macs();
    let (warm, measured) = macs.split_at(cfg.warmup);

    for (i, mac) in warm.iter().enumerate() {
        s.send(i, *mac).await?;
        s.await_replies(std::slice::from_ref(mac), cfg.reply_timeout).await?;
    }

    let mut sent = Vec::with_capacity(measured.len());
    match cfg.mode {
        GenMode::Burst => {
            for (k, mac) in measured.iter().enumerate() {
                sent.push(s.send(cfg.warmup + k, *mac).await?);
            }
            s.await_replies(measured, cfg.reply_timeout).await?;
        }
        GenMode::OneByOne | GenMode::Single => {
            for (k, mac) in measured.iter().enumerate() {
                sent.push(s.send(cfg.warmup + k, *mac).await?);
                s.await_replies(std::slice::from_ref(mac), cfg.reply_timeout).await?;
            }
        }
    }

    let samples = measured
        .iter()
        .zip(sent)
        .enumerate()
        .map(|(index, (mac, at))| RttSample {
            index,
            mac: *mac,
            rtt_ms: s.received[mac].saturating_duration_since(at).as_secs_f64() * 1e3,
        })
        .collect();
    Ok(GeneratorRun { mode: cfg.mode, samples })
}
