// SPDX-License-Identifier: Apache-2.0

//! Per-session output queue that coalesces routes into UPDATE messages.
//!
//! NLRI entries are encoded at enqueue time. Consecutive entries with the
//! same action and identical path attributes are packed together, so the
//! wire order always matches the enqueue order.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::sync::Notify;

use super::evpn::EvpnRoute;
use super::update::{build_reach, build_unreach, pack, reach_capacity, unreach_capacity};
use super::{CodecError, PathAttributes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushPolicy {
    /// Flush once no route has been enqueued for this long.
    pub idle: Duration,
    /// Flush as soon as this many routes are pending; also the per-UPDATE cap.
    pub max_routes: usize,
    /// Enqueue fails beyond this many pending routes.
    pub max_pending: usize,
}

impl Default for FlushPolicy {
    fn default() -> Self {
        Self { idle: Duration::from_millis(5), max_routes: 100, max_pending: 10_000 }
    }
}

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("output queue full ({0} routes pending)")]
    Backpressure(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone)]
enum Action {
    Advertise(Arc<PathAttributes>),
    Withdraw,
}

impl Action {
    fn same_group(&self, other: &Action) -> bool {
        match (self, other) {
            (Action::Advertise(a), Action::Advertise(b)) => Arc::ptr_eq(a, b) || a == b,
            (Action::Withdraw, Action::Withdraw) => true,
            _ => false,
        }
    }
}

#[derive(Debug)]
struct Pending {
    action: Action,
    nlri: Vec<u8>,
}

#[derive(Debug, Default)]
struct Inner {
    items: VecDeque<Pending>,
    last_enqueue: Option<Instant>,
}

/// Messages ready for the wire plus the next instant the queue wants to be
/// polled again, if anything is still pending.
#[derive(Debug, Default)]
pub struct Flush {
    pub messages: Vec<Vec<u8>>,
    pub routes: usize,
    pub next_deadline: Option<Instant>,
}

#[derive(Debug)]
pub struct OutQueue {
    policy: FlushPolicy,
    inner: Mutex<Inner>,
    notify: Notify,
}

impl OutQueue {
    pub fn new(policy: FlushPolicy) -> Self {
        Self { policy, inner: Mutex::default(), notify: Notify::new() }
    }

    pub fn policy(&self) -> FlushPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn enqueue_advertisement(
        &self,
        route: &EvpnRoute,
        attrs: Arc<PathAttributes>,
    ) -> Result<(), QueueError> {
        if attrs.route_targets().next().is_none() {
            return Err(CodecError::InvalidArgument("advertisement without route target".into()).into());
        }
        self.push(Action::Advertise(attrs), route.to_bytes()?)
    }

    pub fn enqueue_withdrawal(&self, route: &EvpnRoute) -> Result<(), QueueError> {
        self.push(Action::Withdraw, route.to_bytes()?)
    }

    fn push(&self, action: Action, nlri: Vec<u8>) -> Result<(), QueueError> {
        {
            let mut inner = self.inner.lock().unwrap();
            if inner.items.len() >= self.policy.max_pending {
                return Err(QueueError::Backpressure(inner.items.len()));
            }
            inner.items.push_back(Pending { action, nlri });
            inner.last_enqueue = Some(Instant::now());
        }
        self.notify.notify_one();
        Ok(())
    }

    /// Resolves after the next enqueue (or immediately if one happened since
    /// the last wait).
    pub async fn notified(&self) {
        self.notify.notified().await
    }

    /// Applies the flush rules at `now`.
    pub fn poll_flush(&self, now: Instant) -> Flush {
        let mut inner = self.inner.lock().unwrap();
        let pending = inner.items.len();
        if pending == 0 {
            return Flush::default();
        }
        let last = inner.last_enqueue.unwrap_or(now);
        let idle_deadline = last + self.policy.idle;
        if pending < self.policy.max_routes && now < idle_deadline {
            return Flush { next_deadline: Some(idle_deadline), ..Flush::default() };
        }
        let items: Vec<Pending> = inner.items.drain(..).collect();
        drop(inner);
        self.encode(items)
    }

    /// Drains everything regardless of timers.
    pub fn drain_all(&self) -> Flush {
        let items: Vec<Pending> = self.inner.lock().unwrap().items.drain(..).collect();
        self.encode(items)
    }

    fn encode(&self, items: Vec<Pending>) -> Flush {
        let mut out = Flush { routes: items.len(), ..Flush::default() };
        let mut start = 0;
        while start < items.len() {
            let mut end = start + 1;
            while end < items.len()
                && end - start < self.policy.max_routes
                && items[end].action.same_group(&items[start].action)
            {
                end += 1;
            }
            let run = &items[start..end];
            let entries = run.iter().map(|p| p.nlri.as_slice());
            match &run[0].action {
                Action::Advertise(attrs) => {
                    for nlri in pack(entries, reach_capacity(attrs)) {
                        out.messages.push(build_reach(attrs, &nlri));
                    }
                }
                Action::Withdraw => {
                    for nlri in pack(entries, unreach_capacity()) {
                        out.messages.push(build_unreach(&nlri));
                    }
                }
            }
            start = end;
        }
        out
    }
}
