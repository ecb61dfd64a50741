// SPDX-License-Identifier: Apache-2.0

//! Domain types shared by the controller, the PE simulator and the harness.

use std::collections::BTreeSet;
use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type EviId = u32;
pub type RpId = u32;
pub type PeId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label pool exhausted")]
    ResourceExhausted,
    #[error("evi {evi_id} already holds label {label}")]
    AlreadyAllocated { evi_id: EviId, label: MplsLabel },
}

/// Serde helpers for types whose canonical external form is their
/// `Display`/`FromStr` text.
macro_rules! serde_via_str {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

/// Type-0 route distinguisher (2-byte ASN : 4-byte assigned number).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RouteDistinguisher {
    pub asn: u16,
    pub assigned_number: u32,
}

impl RouteDistinguisher {
    pub const TYPE_ASN2: u16 = 0;

    pub fn new(asn: u16, assigned_number: u32) -> Self {
        Self { asn, assigned_number }
    }

    pub fn to_bytes(self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[0..2].copy_from_slice(&Self::TYPE_ASN2.to_be_bytes());
        out[2..4].copy_from_slice(&self.asn.to_be_bytes());
        out[4..8].copy_from_slice(&self.assigned_number.to_be_bytes());
        out
    }

    /// Decodes an 8-byte RD. Only the type-0 form is accepted.
    pub fn from_bytes(b: &[u8; 8]) -> Result<Self, ModelError> {
        let ty = u16::from_be_bytes([b[0], b[1]]);
        if ty != Self::TYPE_ASN2 {
            return Err(ModelError::InvalidArgument(format!("unsupported RD type {ty}")));
        }
        Ok(Self {
            asn: u16::from_be_bytes([b[2], b[3]]),
            assigned_number: u32::from_be_bytes([b[4], b[5], b[6], b[7]]),
        })
    }
}

impl fmt::Display for RouteDistinguisher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.asn, self.assigned_number)
    }
}

fn parse_asn_pair(s: &str) -> Result<(u16, u32), ModelError> {
    let bad = || ModelError::InvalidArgument(format!("expected \"asn:number\", got {s:?}"));
    let (a, n) = s.split_once(':').ok_or_else(bad)?;
    let asn = a.trim().parse::<u16>().map_err(|_| bad())?;
    let num = n.trim().parse::<u32>().map_err(|_| bad())?;
    Ok((asn, num))
}

impl FromStr for RouteDistinguisher {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (asn, n) = parse_asn_pair(s)?;
        Ok(Self::new(asn, n))
    }
}
serde_via_str!(RouteDistinguisher);

/// Two-octet-AS specific route target extended community.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RouteTarget {
    pub asn: u16,
    pub local_admin: u32,
}

impl RouteTarget {
    pub const EXT_TYPE: u8 = 0x00;
    pub const EXT_SUBTYPE: u8 = 0x02;

    pub fn new(asn: u16, local_admin: u32) -> Self {
        Self { asn, local_admin }
    }

    pub fn to_ext_community(self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[0] = Self::EXT_TYPE;
        out[1] = Self::EXT_SUBTYPE;
        out[2..4].copy_from_slice(&self.asn.to_be_bytes());
        out[4..8].copy_from_slice(&self.local_admin.to_be_bytes());
        out
    }

    /// Returns `None` for extended communities that are not 2-octet-AS RTs.
    pub fn from_ext_community(c: &[u8; 8]) -> Option<Self> {
        if c[0] != Self::EXT_TYPE || c[1] != Self::EXT_SUBTYPE {
            return None;
        }
        Some(Self {
            asn: u16::from_be_bytes([c[2], c[3]]),
            local_admin: u32::from_be_bytes([c[4], c[5], c[6], c[7]]),
        })
    }
}

impl fmt::Display for RouteTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.asn, self.local_admin)
    }
}

impl FromStr for RouteTarget {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (asn, n) = parse_asn_pair(s)?;
        Ok(Self::new(asn, n))
    }
}
serde_via_str!(RouteTarget);

/// 20-bit MPLS label value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct MplsLabel(u32);

impl MplsLabel {
    pub const MAX: u32 = (1 << 20) - 1;
    /// Values below this are reserved for special purposes.
    pub const FIRST_UNRESERVED: u32 = 16;

    pub fn new(value: u32) -> Result<Self, ModelError> {
        if value > Self::MAX {
            return Err(ModelError::InvalidArgument(format!("label {value} exceeds 20 bits")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// Label in the high-order 20 bits of three octets.
    pub fn to_bytes(self) -> [u8; 3] {
        let v = self.0 << 4;
        [(v >> 16) as u8, (v >> 8) as u8, v as u8]
    }

    pub fn from_bytes(b: [u8; 3]) -> Self {
        let v = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        Self(v >> 4)
    }
}

impl TryFrom<u32> for MplsLabel {
    type Error = ModelError;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<MplsLabel> for u32 {
    fn from(l: MplsLabel) -> u32 {
        l.0
    }
}

impl fmt::Display for MplsLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct EthernetSegmentId(pub [u8; 10]);

impl EthernetSegmentId {
    pub const ZERO: Self = Self([0; 10]);

    /// The all-zero ESI marks a single-homed segment.
    pub fn is_single_homed(&self) -> bool {
        self.0 == [0; 10]
    }
}

impl fmt::Display for EthernetSegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

fn parse_hex_octets<const N: usize>(s: &str, what: &str) -> Result<[u8; N], ModelError> {
    let bad = || ModelError::InvalidArgument(format!("invalid {what} {s:?}"));
    let parts: Vec<&str> = s.split([':', '-']).collect();
    if parts.len() != N {
        return Err(bad());
    }
    let mut out = [0u8; N];
    for (o, p) in out.iter_mut().zip(parts) {
        if p.len() != 2 {
            return Err(bad());
        }
        *o = u8::from_str_radix(p, 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl FromStr for EthernetSegmentId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex_octets::<10>(s, "ESI").map(Self)
    }
}
serde_via_str!(EthernetSegmentId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    /// Builds a MAC from the low 48 bits of `v`.
    pub fn from_u64(v: u64) -> Self {
        let b = v.to_be_bytes();
        Self([b[2], b[3], b[4], b[5], b[6], b[7]])
    }

    pub fn to_u64(self) -> u64 {
        self.0.iter().fold(0u64, |acc, b| (acc << 8) | u64::from(*b))
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl FromStr for MacAddr {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex_octets::<6>(s, "MAC address").map(Self)
    }
}
serde_via_str!(MacAddr);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EviState {
    Pending,
    Deployed,
    Failed,
    Deleting,
}

impl fmt::Display for EviState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EviState::Pending => "pending",
            EviState::Deployed => "deployed",
            EviState::Failed => "failed",
            EviState::Deleting => "deleting",
        };
        f.write_str(s)
    }
}

/// An EVPN instance as owned by the controller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EviRecord {
    pub evi_id: EviId,
    pub customer_id: String,
    pub virtual_network_id: String,
    pub sap_id: String,
    pub network_ids: BTreeSet<String>,
    pub pe_ids: BTreeSet<PeId>,
    pub rd: RouteDistinguisher,
    pub rt: RouteTarget,
    pub mpls_label: MplsLabel,
    pub vni: u32,
    pub rp_id: Option<RpId>,
    pub state: EviState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub rp_id: RpId,
    pub name: String,
    pub allow_mac_advertisement: bool,
    pub import_rts: BTreeSet<RouteTarget>,
    pub export_rts: BTreeSet<RouteTarget>,
    pub max_mac_routes: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Local,
    Remote,
}

/// A row of the main MAC table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacTableEntry {
    pub mac: MacAddr,
    pub ip: Option<IpAddr>,
    pub evi_id: EviId,
    pub origin: Origin,
    pub mpls_label: MplsLabel,
    pub esi: EthernetSegmentId,
    /// Next-hop PEs, kept sorted; empty for local entries.
    pub path_list: Vec<PeId>,
    pub learned_at: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LocalEncap {
    Vlan(u16),
    Vxlan(u32),
    None,
}

/// VXLAN segment to EVI mapping with the PEs that announced participation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxMapping {
    pub vni: u32,
    pub evi_id: EviId,
    pub participating_pes: BTreeSet<PeId>,
    pub local_encap: LocalEncap,
}

/// Maps an EVI to its type-0 RD and route target. Both carry the EVI id as
/// their assigned number, which makes the mapping injective.
pub fn derive_rd_rt(
    evi_id: u64,
    controller_asn: u16,
) -> Result<(RouteDistinguisher, RouteTarget), ModelError> {
    if evi_id == 0 {
        return Err(ModelError::InvalidArgument("evi_id must be positive".into()));
    }
    let n = u32::try_from(evi_id)
        .map_err(|_| ModelError::InvalidArgument(format!("evi_id {evi_id} exceeds 32 bits")))?;
    Ok((RouteDistinguisher::new(controller_asn, n), RouteTarget::new(controller_asn, n)))
}
