// SPDX-License-Identifier: Apache-2.0

//! UPDATE messages carrying EVPN NLRI in MP_REACH_NLRI / MP_UNREACH_NLRI.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::evpn::{decode_nlri_list, EvpnRoute};
use super::message::{frame, split_header, HEADER_LEN, MAX_MESSAGE_LEN, MSG_UPDATE};
use super::{CodecError, AFI_L2VPN, SAFI_EVPN};
use crate::model::RouteTarget;

pub const ATTR_ORIGIN: u8 = 1;
pub const ATTR_AS_PATH: u8 = 2;
pub const ATTR_MP_REACH_NLRI: u8 = 14;
pub const ATTR_MP_UNREACH_NLRI: u8 = 15;
pub const ATTR_EXTENDED_COMMUNITIES: u8 = 16;

const FLAG_OPTIONAL: u8 = 0x80;
const FLAG_TRANSITIVE: u8 = 0x40;
const FLAG_EXTENDED_LENGTH: u8 = 0x10;

const AS_SEQUENCE: u8 = 2;

/// Path attributes shared by every route of one UPDATE.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathAttributes {
    pub origin: u8,
    pub as_path: Vec<u16>,
    pub next_hop: Ipv4Addr,
    pub extended_communities: Vec<[u8; 8]>,
}

impl PathAttributes {
    /// IGP-origin attributes carrying the given route targets.
    pub fn with_route_targets(
        next_hop: Ipv4Addr,
        rts: impl IntoIterator<Item = RouteTarget>,
    ) -> Self {
        Self {
            origin: 0,
            as_path: Vec::new(),
            next_hop,
            extended_communities: rts.into_iter().map(RouteTarget::to_ext_community).collect(),
        }
    }

    pub fn route_targets(&self) -> impl Iterator<Item = RouteTarget> + '_ {
        self.extended_communities.iter().filter_map(RouteTarget::from_ext_community)
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.origin > 2 {
            return Err(CodecError::InvalidArgument(format!("origin {}", self.origin)));
        }
        if self.as_path.len() > 255 {
            return Err(CodecError::InvalidArgument("AS path longer than one segment".into()));
        }
        if self.route_targets().next().is_none() {
            return Err(CodecError::InvalidArgument(
                "EVPN advertisement carries no route target".into(),
            ));
        }
        Ok(())
    }
}

/// Result of decoding one UPDATE.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedUpdate {
    pub advertised: Vec<EvpnRoute>,
    pub withdrawn: Vec<EvpnRoute>,
    /// Present when the message carried MP_REACH_NLRI.
    pub attrs: Option<PathAttributes>,
    pub skipped_unknown: usize,
}

fn push_attr(out: &mut Vec<u8>, flags: u8, ty: u8, value: &[u8]) {
    if value.len() > 255 || flags & FLAG_EXTENDED_LENGTH != 0 {
        out.push(flags | FLAG_EXTENDED_LENGTH);
        out.push(ty);
        out.extend_from_slice(&(value.len() as u16).to_be_bytes());
    } else {
        out.push(flags);
        out.push(ty);
        out.push(value.len() as u8);
    }
    out.extend_from_slice(value);
}

/// Bytes of a message built around `nlri_bytes` of MP_REACH payload.
fn reach_overhead(attrs: &PathAttributes) -> usize {
    let ext = 8 * attrs.extended_communities.len();
    let as_path = if attrs.as_path.is_empty() { 0 } else { 2 + 2 * attrs.as_path.len() };
    HEADER_LEN
        + 2
        + 2
        + (3 + 1)
        + (3 + as_path)
        + (4 + 2 + 1 + 1 + 4 + 1)
        + (if ext > 255 { 4 } else { 3 } + ext)
}

fn unreach_overhead() -> usize {
    HEADER_LEN + 2 + 2 + 4 + 2 + 1
}

/// Builds one UPDATE advertising pre-encoded NLRI entries.
pub fn build_reach(attrs: &PathAttributes, nlri: &[u8]) -> Vec<u8> {
    let mut pa = Vec::with_capacity(64 + nlri.len());
    push_attr(&mut pa, FLAG_TRANSITIVE, ATTR_ORIGIN, &[attrs.origin]);
    let mut asp = Vec::new();
    if !attrs.as_path.is_empty() {
        asp.push(AS_SEQUENCE);
        asp.push(attrs.as_path.len() as u8);
        for a in &attrs.as_path {
            asp.extend_from_slice(&a.to_be_bytes());
        }
    }
    push_attr(&mut pa, FLAG_TRANSITIVE, ATTR_AS_PATH, &asp);
    let mut mp = Vec::with_capacity(9 + nlri.len());
    mp.extend_from_slice(&AFI_L2VPN.to_be_bytes());
    mp.push(SAFI_EVPN);
    mp.push(4);
    mp.extend_from_slice(&attrs.next_hop.octets());
    mp.push(0);
    mp.extend_from_slice(nlri);
    push_attr(&mut pa, FLAG_OPTIONAL | FLAG_EXTENDED_LENGTH, ATTR_MP_REACH_NLRI, &mp);
    let ext: Vec<u8> = attrs.extended_communities.iter().flatten().copied().collect();
    push_attr(&mut pa, FLAG_OPTIONAL | FLAG_TRANSITIVE, ATTR_EXTENDED_COMMUNITIES, &ext);
    wrap_update(&pa)
}

/// Builds one UPDATE withdrawing pre-encoded NLRI entries.
pub fn build_unreach(nlri: &[u8]) -> Vec<u8> {
    let mut mp = Vec::with_capacity(3 + nlri.len());
    mp.extend_from_slice(&AFI_L2VPN.to_be_bytes());
    mp.push(SAFI_EVPN);
    mp.extend_from_slice(nlri);
    let mut pa = Vec::new();
    push_attr(&mut pa, FLAG_OPTIONAL | FLAG_EXTENDED_LENGTH, ATTR_MP_UNREACH_NLRI, &mp);
    wrap_update(&pa)
}

fn wrap_update(path_attrs: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(4 + path_attrs.len());
    body.extend_from_slice(&0u16.to_be_bytes());
    body.extend_from_slice(&(path_attrs.len() as u16).to_be_bytes());
    body.extend_from_slice(path_attrs);
    frame(MSG_UPDATE, &body)
}

/// Maximum MP_REACH payload that keeps the message within 4096 bytes.
pub fn reach_capacity(attrs: &PathAttributes) -> usize {
    MAX_MESSAGE_LEN.saturating_sub(reach_overhead(attrs))
}

pub fn unreach_capacity() -> usize {
    MAX_MESSAGE_LEN - unreach_overhead()
}

/// Packs encoded NLRI entries into as few payloads as fit in `capacity`.
pub fn pack<'a>(entries: impl IntoIterator<Item = &'a [u8]>, capacity: usize) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    let mut cur = Vec::new();
    for e in entries {
        if !cur.is_empty() && cur.len() + e.len() > capacity {
            out.push(std::mem::take(&mut cur));
        }
        cur.extend_from_slice(e);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Serializes routes sharing `attrs` into one or more UPDATE messages, each
/// at most 4096 bytes.
pub fn serialize_update(
    routes: &[EvpnRoute],
    attrs: &PathAttributes,
) -> Result<Vec<Vec<u8>>, CodecError> {
    if routes.is_empty() {
        return Err(CodecError::InvalidArgument("no routes to advertise".into()));
    }
    attrs.validate()?;
    let capacity = reach_capacity(attrs);
    let encoded = routes.iter().map(EvpnRoute::to_bytes).collect::<Result<Vec<_>, _>>()?;
    Ok(pack(encoded.iter().map(Vec::as_slice), capacity)
        .iter()
        .map(|nlri| build_reach(attrs, nlri))
        .collect())
}

pub fn serialize_withdrawal(routes: &[EvpnRoute]) -> Result<Vec<Vec<u8>>, CodecError> {
    if routes.is_empty() {
        return Err(CodecError::InvalidArgument("no routes to withdraw".into()));
    }
    let encoded = routes.iter().map(EvpnRoute::to_bytes).collect::<Result<Vec<_>, _>>()?;
    Ok(pack(encoded.iter().map(Vec::as_slice), unreach_capacity())
        .iter()
        .map(|nlri| build_unreach(nlri))
        .collect())
}

/// Parses one complete UPDATE message, header included.
pub fn parse_update(msg: &[u8]) -> Result<ParsedUpdate, CodecError> {
    let (ty, body) = split_header(msg)?;
    if ty != MSG_UPDATE {
        return Err(CodecError::Malformed(format!("message type {ty} is not UPDATE")));
    }
    let malformed = |s: &str| CodecError::Malformed(s.to_string());
    if body.len() < 4 {
        return Err(malformed("UPDATE too short"));
    }
    let wlen = usize::from(u16::from_be_bytes([body[0], body[1]]));
    let rest = body.get(2 + wlen..).ok_or_else(|| malformed("withdrawn routes truncated"))?;
    if rest.len() < 2 {
        return Err(malformed("missing path attribute length"));
    }
    let alen = usize::from(u16::from_be_bytes([rest[0], rest[1]]));
    let mut attrs_buf = rest.get(2..2 + alen).ok_or_else(|| malformed("path attributes truncated"))?;

    let mut out = ParsedUpdate::default();
    let mut origin = None;
    let mut as_path = None;
    let mut next_hop = None;
    let mut ext = Vec::new();

    while !attrs_buf.is_empty() {
        if attrs_buf.len() < 3 {
            return Err(malformed("attribute header truncated"));
        }
        let flags = attrs_buf[0];
        let ty = attrs_buf[1];
        let (len, hdr) = if flags & FLAG_EXTENDED_LENGTH != 0 {
            if attrs_buf.len() < 4 {
                return Err(malformed("attribute header truncated"));
            }
            (usize::from(u16::from_be_bytes([attrs_buf[2], attrs_buf[3]])), 4)
        } else {
            (usize::from(attrs_buf[2]), 3)
        };
        let value = attrs_buf
            .get(hdr..hdr + len)
            .ok_or_else(|| malformed("attribute value truncated"))?;
        attrs_buf = &attrs_buf[hdr + len..];

        match ty {
            ATTR_ORIGIN => {
                if value.len() != 1 || value[0] > 2 {
                    return Err(malformed("bad ORIGIN"));
                }
                origin = Some(value[0]);
            }
            ATTR_AS_PATH => {
                let mut path = Vec::new();
                let mut v = value;
                while !v.is_empty() {
                    if v.len() < 2 {
                        return Err(malformed("AS_PATH segment truncated"));
                    }
                    let n = usize::from(v[1]);
                    let seg = v.get(2..2 + 2 * n).ok_or_else(|| malformed("AS_PATH truncated"))?;
                    path.extend(seg.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])));
                    v = &v[2 + 2 * n..];
                }
                as_path = Some(path);
            }
            ATTR_MP_REACH_NLRI => {
                if value.len() < 5 {
                    return Err(malformed("MP_REACH_NLRI truncated"));
                }
                let afi = u16::from_be_bytes([value[0], value[1]]);
                let safi = value[2];
                if (afi, safi) != (AFI_L2VPN, SAFI_EVPN) {
                    continue;
                }
                let nh_len = usize::from(value[3]);
                if nh_len != 4 {
                    return Err(malformed("only 4-byte next hops are supported"));
                }
                let nh = value.get(4..8).ok_or_else(|| malformed("next hop truncated"))?;
                next_hop = Some(Ipv4Addr::new(nh[0], nh[1], nh[2], nh[3]));
                let nlri = value.get(9..).ok_or_else(|| malformed("MP_REACH_NLRI truncated"))?;
                let list = decode_nlri_list(nlri)?;
                out.advertised.extend(list.routes);
                out.skipped_unknown += list.skipped_unknown;
            }
            ATTR_MP_UNREACH_NLRI => {
                if value.len() < 3 {
                    return Err(malformed("MP_UNREACH_NLRI truncated"));
                }
                let afi = u16::from_be_bytes([value[0], value[1]]);
                if (afi, value[2]) != (AFI_L2VPN, SAFI_EVPN) {
                    continue;
                }
                let list = decode_nlri_list(&value[3..])?;
                out.withdrawn.extend(list.routes);
                out.skipped_unknown += list.skipped_unknown;
            }
            ATTR_EXTENDED_COMMUNITIES => {
                if value.len() % 8 != 0 {
                    return Err(malformed("extended communities not a multiple of 8"));
                }
                ext.extend(value.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap()));
            }
            _ => {}
        }
    }

    if let Some(next_hop) = next_hop {
        let origin = origin.ok_or_else(|| malformed("missing ORIGIN"))?;
        let as_path = as_path.ok_or_else(|| malformed("missing AS_PATH"))?;
        out.attrs = Some(PathAttributes { origin, as_path, next_hop, extended_communities: ext });
    }
    Ok(out)
}
