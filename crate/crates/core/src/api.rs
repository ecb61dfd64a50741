// SPDX-License-Identifier: Apache-2.0

//! JSON bodies of the northbound REST API, shared by server and clients.

use std::collections::BTreeSet;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::model::{EviId, EviRecord, MacAddr, RouteTarget, RoutingPolicy, RpId};
use crate::service::tables::EviTiming;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L2vpnRequest {
    pub customer_id: String,
    pub virtual_network_id: String,
    pub sap_id: String,
    pub network_ids: Vec<String>,
    pub pe_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpRequest {
    pub name: String,
    pub allow_mac_advertisement: bool,
    #[serde(default)]
    pub import_rts: Vec<String>,
    #[serde(default)]
    pub export_rts: Vec<String>,
    #[serde(default)]
    pub max_mac_routes: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssociationRequest {
    /// Optional; must match the EVI named in the path when present.
    #[serde(default)]
    pub evi_id: Option<EviId>,
    pub rp_id: RpId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointRequest {
    pub mac: MacAddr,
    #[serde(default)]
    pub ip: Option<IpAddr>,
    pub network_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Created {
    pub id: u32,
    /// Microseconds since controller start at which the request was received.
    pub receipt_ts_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// Query view of an EVI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2vpnDoc {
    #[serde(flatten)]
    pub record: EviRecord,
    /// Policy whose configuration is active on the PEs.
    pub applied_rp_id: Option<RpId>,
    #[serde(default)]
    pub failure: Option<String>,
    pub timing: TimingDoc,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingDoc {
    pub l2vpn_ms: f64,
    pub netconf_ms: f64,
    pub total_ms: Option<f64>,
}

impl From<EviTiming> for TimingDoc {
    fn from(t: EviTiming) -> Self {
        Self { l2vpn_ms: t.l2vpn_ms, netconf_ms: t.netconf_ms, total_ms: t.total_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpDoc {
    #[serde(flatten)]
    pub policy: RoutingPolicy,
    /// EVIs currently associated with this policy.
    pub evi_ids: BTreeSet<EviId>,
    pub rp_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArpAnswer {
    pub evi_id: EviId,
    pub ip: IpAddr,
    pub mac: Option<MacAddr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointAck {
    /// EVI the endpoint's network maps to, if any.
    pub evi_id: Option<EviId>,
}

/// Parses `asn:number` route-target strings; on failure returns the index of
/// the first bad entry.
pub fn parse_route_targets(list: &[String]) -> Result<BTreeSet<RouteTarget>, usize> {
    list.iter().enumerate().map(|(i, s)| s.parse().map_err(|_| i)).collect()
}
