// SPDX-License-Identifier: Apache-2.0

//! ARP suppression proxy and silent-host announcer.
//!
//! Queries are answered from the controller's MAC/IP table, scoped to one
//! EVI. VM boot notifications are treated like a gratuitous ARP.

use std::net::{IpAddr, Ipv4Addr};

use serde::{Deserialize, Serialize};

use crate::model::{EviId, MacAddr};
use crate::service::{ServiceError, ServiceHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArpQuery {
    pub target_ip: Ipv4Addr,
    pub evi_id: EviId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArpResult {
    Hit(MacAddr),
    Miss,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ArpCounters {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone)]
pub struct ArpProxy {
    service: ServiceHandle,
}

impl ArpProxy {
    pub fn new(service: ServiceHandle) -> Self {
        Self { service }
    }

    pub fn handle_arp_request(&self, q: ArpQuery) -> ArpResult {
        match self.service.arp_query(q.evi_id, IpAddr::V4(q.target_ip)).mac {
            Some(mac) => ArpResult::Hit(mac),
            None => ArpResult::Miss,
        }
    }

    /// Announces a freshly booted VM as if it had sent a GARP.
    pub async fn on_vm_boot(
        &self,
        mac: MacAddr,
        ip: Option<IpAddr>,
        network_id: &str,
    ) -> Result<Option<EviId>, ServiceError> {
        self.service.endpoint_up(mac, ip, network_id.to_string()).await
    }

    pub fn counters(&self) -> ArpCounters {
        let s = self.service.stats();
        ArpCounters { hits: s.arp_hits, misses: s.arp_misses }
    }
}
