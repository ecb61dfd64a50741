// SPDX-License-Identifier: Apache-2.0

//! Instrumented in-process message bus between controller modules.
//!
//! Every message is stamped when enqueued and again when the consumer takes
//! it, so the transfer overhead can be reported separately from processing.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::sync::mpsc;

#[derive(Debug)]
struct Stamped<T> {
    payload: T,
    enqueued_at: Instant,
}

/// A message as seen by the consumer.
#[derive(Debug)]
pub struct Delivered<T> {
    pub payload: T,
    pub enqueued_at: Instant,
    pub dequeued_at: Instant,
}

impl<T> Delivered<T> {
    pub fn transfer_time(&self) -> Duration {
        self.dequeued_at.saturating_duration_since(self.enqueued_at)
    }
}

#[derive(Debug, Default)]
pub struct BusStats {
    delivered: AtomicU64,
    transfer_ns: AtomicU64,
}

impl BusStats {
    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }

    pub fn mean_transfer(&self) -> Option<Duration> {
        let n = self.delivered();
        (n > 0).then(|| Duration::from_nanos(self.transfer_ns.load(Ordering::Relaxed) / n))
    }
}

#[derive(Debug)]
pub struct BusSender<T> {
    tx: mpsc::UnboundedSender<Stamped<T>>,
}

impl<T> Clone for BusSender<T> {
    fn clone(&self) -> Self {
        Self { tx: self.tx.clone() }
    }
}

impl<T> BusSender<T> {
    /// Returns the enqueue stamp, or `None` if the consumer is gone.
    pub fn send(&self, payload: T) -> Option<Instant> {
        let enqueued_at = Instant::now();
        self.tx.send(Stamped { payload, enqueued_at }).ok().map(|_| enqueued_at)
    }
}

#[derive(Debug)]
pub struct BusReceiver<T> {
    rx: mpsc::UnboundedReceiver<Stamped<T>>,
    stats: Arc<BusStats>,
}

impl<T> BusReceiver<T> {
    pub async fn recv(&mut self) -> Option<Delivered<T>> {
        let s = self.rx.recv().await?;
        Some(self.stamp(s))
    }

    pub fn try_recv(&mut self) -> Option<Delivered<T>> {
        let s = self.rx.try_recv().ok()?;
        Some(self.stamp(s))
    }

    fn stamp(&self, s: Stamped<T>) -> Delivered<T> {
        let d = Delivered { payload: s.payload, enqueued_at: s.enqueued_at, dequeued_at: Instant::now() };
        self.stats.delivered.fetch_add(1, Ordering::Relaxed);
        self.stats
            .transfer_ns
            .fetch_add(d.transfer_time().as_nanos() as u64, Ordering::Relaxed);
        d
    }

    pub fn stats(&self) -> Arc<BusStats> {
        self.stats.clone()
    }
}

pub fn channel<T>() -> (BusSender<T>, BusReceiver<T>) {
    let (tx, rx) = mpsc::unbounded_channel();
    (BusSender { tx }, BusReceiver { rx, stats: Arc::default() })
}
