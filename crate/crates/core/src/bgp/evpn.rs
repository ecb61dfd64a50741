// SPDX-License-Identifier: Apache-2.0

//! EVPN NLRI (AFI 25 / SAFI 70) route types 1 to 4.
//!
//! Each NLRI entry is `route_type(1) | length(1) | body`. IP and MAC length
//! octets are expressed in bits.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::model::{EthernetSegmentId, MacAddr, MplsLabel, RouteDistinguisher};

pub const ROUTE_TYPE_ETHERNET_AD: u8 = 1;
pub const ROUTE_TYPE_MAC_IP: u8 = 2;
pub const ROUTE_TYPE_INCLUSIVE_MULTICAST: u8 = 3;
pub const ROUTE_TYPE_ETHERNET_SEGMENT: u8 = 4;

/// A decoded EVPN route.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "route_type", rename_all = "snake_case")]
pub enum EvpnRoute {
    /// Type 1.
    EthernetAd {
        rd: RouteDistinguisher,
        esi: EthernetSegmentId,
        eth_tag: u32,
        label: MplsLabel,
    },
    /// Type 2. Carries one or two labels.
    MacIp {
        rd: RouteDistinguisher,
        esi: EthernetSegmentId,
        eth_tag: u32,
        mac: MacAddr,
        ip: Option<IpAddr>,
        labels: Vec<MplsLabel>,
    },
    /// Type 3.
    InclusiveMulticast {
        rd: RouteDistinguisher,
        eth_tag: u32,
        originating_ip: IpAddr,
    },
    /// Type 4.
    EthernetSegment {
        rd: RouteDistinguisher,
        esi: EthernetSegmentId,
        originating_ip: IpAddr,
    },
}

impl EvpnRoute {
    pub fn route_type(&self) -> u8 {
        match self {
            EvpnRoute::EthernetAd { .. } => ROUTE_TYPE_ETHERNET_AD,
            EvpnRoute::MacIp { .. } => ROUTE_TYPE_MAC_IP,
            EvpnRoute::InclusiveMulticast { .. } => ROUTE_TYPE_INCLUSIVE_MULTICAST,
            EvpnRoute::EthernetSegment { .. } => ROUTE_TYPE_ETHERNET_SEGMENT,
        }
    }

    pub fn rd(&self) -> RouteDistinguisher {
        match self {
            EvpnRoute::EthernetAd { rd, .. }
            | EvpnRoute::MacIp { rd, .. }
            | EvpnRoute::InclusiveMulticast { rd, .. }
            | EvpnRoute::EthernetSegment { rd, .. } => *rd,
        }
    }

    pub fn mac(&self) -> Option<MacAddr> {
        match self {
            EvpnRoute::MacIp { mac, .. } => Some(*mac),
            _ => None,
        }
    }

    /// The route with label fields cleared, identifying it for replacement
    /// and withdrawal.
    pub fn key(&self) -> EvpnRoute {
        let zero = MplsLabel::new(0).unwrap();
        let mut k = self.clone();
        match &mut k {
            EvpnRoute::EthernetAd { label, .. } => *label = zero,
            EvpnRoute::MacIp { labels, .. } => labels.clear(),
            _ => {}
        }
        k
    }

    /// Checks per-type field presence that the type system does not pin.
    pub fn validate(&self) -> Result<(), CodecError> {
        if let EvpnRoute::MacIp { labels, .. } = self {
            if labels.is_empty() || labels.len() > 2 {
                return Err(CodecError::InvalidArgument(format!(
                    "MAC/IP route needs one or two labels, has {}",
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    fn body_len(&self) -> usize {
        match self {
            EvpnRoute::EthernetAd { .. } => 8 + 10 + 4 + 3,
            EvpnRoute::MacIp { ip, labels, .. } => {
                8 + 10 + 4 + 1 + 6 + 1 + ip_len(ip.as_ref()) + 3 * labels.len()
            }
            EvpnRoute::InclusiveMulticast { originating_ip, .. } => {
                8 + 4 + 1 + ip_len(Some(originating_ip))
            }
            EvpnRoute::EthernetSegment { originating_ip, .. } => {
                8 + 10 + 1 + ip_len(Some(originating_ip))
            }
        }
    }

    /// Encoded size of the NLRI entry, including type and length octets.
    pub fn encoded_len(&self) -> usize {
        2 + self.body_len()
    }

    pub fn encode(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        self.validate()?;
        out.push(self.route_type());
        out.push(self.body_len() as u8);
        match self {
            EvpnRoute::EthernetAd { rd, esi, eth_tag, label } => {
                out.extend_from_slice(&rd.to_bytes());
                out.extend_from_slice(&esi.0);
                out.extend_from_slice(&eth_tag.to_be_bytes());
                out.extend_from_slice(&label.to_bytes());
            }
            EvpnRoute::MacIp { rd, esi, eth_tag, mac, ip, labels } => {
                out.extend_from_slice(&rd.to_bytes());
                out.extend_from_slice(&esi.0);
                out.extend_from_slice(&eth_tag.to_be_bytes());
                out.push(48);
                out.extend_from_slice(&mac.0);
                put_ip(out, ip.as_ref());
                for l in labels {
                    out.extend_from_slice(&l.to_bytes());
                }
            }
            EvpnRoute::InclusiveMulticast { rd, eth_tag, originating_ip } => {
                out.extend_from_slice(&rd.to_bytes());
                out.extend_from_slice(&eth_tag.to_be_bytes());
                put_ip(out, Some(originating_ip));
            }
            EvpnRoute::EthernetSegment { rd, esi, originating_ip } => {
                out.extend_from_slice(&rd.to_bytes());
                out.extend_from_slice(&esi.0);
                put_ip(out, Some(originating_ip));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CodecError> {
        let mut v = Vec::with_capacity(self.encoded_len());
        self.encode(&mut v)?;
        Ok(v)
    }
}

fn ip_len(ip: Option<&IpAddr>) -> usize {
    match ip {
        None => 0,
        Some(IpAddr::V4(_)) => 4,
        Some(IpAddr::V6(_)) => 16,
    }
}

fn put_ip(out: &mut Vec<u8>, ip: Option<&IpAddr>) {
    match ip {
        None => out.push(0),
        Some(IpAddr::V4(a)) => {
            out.push(32);
            out.extend_from_slice(&a.octets());
        }
        Some(IpAddr::V6(a)) => {
            out.push(128);
            out.extend_from_slice(&a.octets());
        }
    }
}

/// Outcome of decoding a run of NLRI entries.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct NlriList {
    pub routes: Vec<EvpnRoute>,
    /// Entries whose route type is not 1 to 4; skipped by length.
    pub skipped_unknown: usize,
}

/// Decodes a sequence of EVPN NLRI entries filling `buf` exactly.
pub fn decode_nlri_list(mut buf: &[u8]) -> Result<NlriList, CodecError> {
    let mut out = NlriList::default();
    while !buf.is_empty() {
        if buf.len() < 2 {
            return Err(CodecError::Malformed("truncated NLRI header".into()));
        }
        let (ty, len) = (buf[0], usize::from(buf[1]));
        let rest = &buf[2..];
        if rest.len() < len {
            return Err(CodecError::Malformed(format!(
                "NLRI length {len} exceeds remaining {} bytes",
                rest.len()
            )));
        }
        let body = &rest[..len];
        match decode_body(ty, body)? {
            Some(route) => out.routes.push(route),
            None => out.skipped_unknown += 1,
        }
        buf = &rest[len..];
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Malformed("NLRI body too short".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn rd(&mut self) -> Result<RouteDistinguisher, CodecError> {
        let b: [u8; 8] = self.take(8)?.try_into().unwrap();
        RouteDistinguisher::from_bytes(&b).map_err(|e| CodecError::Malformed(e.to_string()))
    }

    fn esi(&mut self) -> Result<EthernetSegmentId, CodecError> {
        Ok(EthernetSegmentId(self.take(10)?.try_into().unwrap()))
    }

    fn label(&mut self) -> Result<MplsLabel, CodecError> {
        Ok(MplsLabel::from_bytes(self.take(3)?.try_into().unwrap()))
    }

    fn ip(&mut self, allow_absent: bool) -> Result<Option<IpAddr>, CodecError> {
        match self.u8()? {
            0 if allow_absent => Ok(None),
            32 => {
                let b: [u8; 4] = self.take(4)?.try_into().unwrap();
                Ok(Some(IpAddr::V4(Ipv4Addr::from(b))))
            }
            128 => {
                let b: [u8; 16] = self.take(16)?.try_into().unwrap();
                Ok(Some(IpAddr::V6(Ipv6Addr::from(b))))
            }
            bits => Err(CodecError::Malformed(format!("invalid IP length {bits}"))),
        }
    }

    fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Malformed(format!("{} trailing bytes in NLRI body", self.buf.len())))
        }
    }
}

fn decode_body(ty: u8, body: &[u8]) -> Result<Option<EvpnRoute>, CodecError> {
    let mut c = Cursor { buf: body };
    let route = match ty {
        ROUTE_TYPE_ETHERNET_AD => EvpnRoute::EthernetAd {
            rd: c.rd()?,
            esi: c.esi()?,
            eth_tag: c.u32()?,
            label: c.label()?,
        },
        ROUTE_TYPE_MAC_IP => {
            let rd = c.rd()?;
            let esi = c.esi()?;
            let eth_tag = c.u32()?;
            let mac_bits = c.u8()?;
            if mac_bits != 48 {
                return Err(CodecError::Malformed(format!("invalid MAC length {mac_bits}")));
            }
            let mac = MacAddr(c.take(6)?.try_into().unwrap());
            let ip = c.ip(true)?;
            let mut labels = vec![c.label()?];
            if !c.buf.is_empty() {
                labels.push(c.label()?);
            }
            EvpnRoute::MacIp { rd, esi, eth_tag, mac, ip, labels }
        }
        ROUTE_TYPE_INCLUSIVE_MULTICAST => EvpnRoute::InclusiveMulticast {
            rd: c.rd()?,
            eth_tag: c.u32()?,
            originating_ip: c.ip(false)?.unwrap(),
        },
        ROUTE_TYPE_ETHERNET_SEGMENT => EvpnRoute::EthernetSegment {
            rd: c.rd()?,
            esi: c.esi()?,
            originating_ip: c.ip(false)?.unwrap(),
        },
        _ => return Ok(None),
    };
    c.finish()?;
    Ok(Some(route))
}
