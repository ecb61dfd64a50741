// SPDX-License-Identifier: Apache-2.0

//! Whitebox pipeline instrumentation, keyed by MAC address.
//!
//! A record spans from the moment an UPDATE carrying a MAC/IP route is read
//! off the wire until the NLRI of the reply for the same MAC is serialized.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::model::MacAddr;

#[derive(Debug, Clone, Copy, Default)]
struct Stamps {
    parse_start: Option<Instant>,
    parse_end: Option<Instant>,
    bus_in: Option<(Instant, Instant)>,
    bus_out: Option<(Instant, Instant)>,
    serialize_end: Option<Instant>,
}

/// One completed parse-to-serialize measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WbtRecord {
    pub mac: MacAddr,
    pub pipeline_ms: f64,
    pub parse_ms: f64,
    pub bus_ms: f64,
    pub bus_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WbtReport {
    pub instrumentation_enabled: bool,
    pub records: Vec<WbtRecord>,
}

impl WbtReport {
    pub fn mean_pipeline_ms(&self) -> Option<f64> {
        mean(self.records.iter().map(|r| r.pipeline_ms))
    }

    pub fn mean_bus_ms(&self) -> Option<f64> {
        mean(self.records.iter().map(|r| r.bus_ms))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = it.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Default)]
pub struct WbtTracer {
    enabled: AtomicBool,
    stamps: Mutex<HashMap<MacAddr, Stamps>>,
}

impl WbtTracer {
    pub fn new(enabled: bool) -> Self {
        Self { enabled: AtomicBool::new(enabled), stamps: Mutex::default() }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    fn with(&self, mac: MacAddr, create: bool, f: impl FnOnce(&mut Stamps)) {
        if !self.is_enabled() {
            return;
        }
        let mut map = self.stamps.lock().unwrap();
        if create {
            f(map.entry(mac).or_default());
        } else if let Some(s) = map.get_mut(&mac) {
            f(s);
        }
    }

    /// Starts (or restarts) the record for `mac`.
    pub fn mark_parsed(&self, mac: MacAddr, start: Instant, end: Instant) {
        self.with(mac, true, |s| {
            *s = Stamps { parse_start: Some(start), parse_end: Some(end), ..Stamps::default() }
        });
    }

    pub fn mark_bus_in(&self, mac: MacAddr, enqueued: Instant, dequeued: Instant) {
        self.with(mac, false, |s| {
            s.bus_in.get_or_insert((enqueued, dequeued));
        });
    }

    pub fn mark_bus_out(&self, mac: MacAddr, enqueued: Instant, dequeued: Instant) {
        self.with(mac, false, |s| {
            s.bus_out.get_or_insert((enqueued, dequeued));
        });
    }

    pub fn mark_serialized(&self, mac: MacAddr, at: Instant) {
        self.with(mac, false, |s| {
            if s.bus_out.is_some() {
                s.serialize_end.get_or_insert(at);
            }
        });
    }

    /// Completed records for the given MACs, in the given order. Incomplete
    /// ones are skipped.
    pub fn collect(&self, macs: &[MacAddr]) -> WbtReport {
        let map = self.stamps.lock().unwrap();
        let records = macs
            .iter()
            .filter_map(|mac| {
                let s = map.get(mac)?;
                let start = s.parse_start?;
                let (in_enq, in_deq) = s.bus_in?;
                let (out_enq, out_deq) = s.bus_out?;
                let end = s.serialize_end?;
                let pipeline = end.saturating_duration_since(start);
                let bus = in_deq.saturating_duration_since(in_enq)
                    + out_deq.saturating_duration_since(out_enq);
                let pipeline_ms = ms(pipeline);
                Some(WbtRecord {
                    mac: *mac,
                    pipeline_ms,
                    parse_ms: ms(s.parse_end?.saturating_duration_since(start)),
                    bus_ms: ms(bus),
                    bus_share: if pipeline_ms > 0.0 { (ms(bus) / pipeline_ms).min(1.0) } else { 0.0 },
                })
            })
            .collect();
        WbtReport { instrumentation_enabled: self.is_enabled(), records }
    }

    pub fn clear(&self) {
        self.stamps.lock().unwrap().clear();
    }
}
