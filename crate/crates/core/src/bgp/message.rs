// SPDX-License-Identifier: Apache-2.0

//! BGP-4 message framing plus OPEN, KEEPALIVE and NOTIFICATION bodies.

use std::net::Ipv4Addr;

use tokio::io::{AsyncRead, AsyncReadExt};

use super::{CodecError, AFI_L2VPN, SAFI_EVPN};

pub const HEADER_LEN: usize = 19;
pub const MAX_MESSAGE_LEN: usize = 4096;
pub const MARKER: [u8; 16] = [0xff; 16];

pub const MSG_OPEN: u8 = 1;
pub const MSG_UPDATE: u8 = 2;
pub const MSG_NOTIFICATION: u8 = 3;
pub const MSG_KEEPALIVE: u8 = 4;

const OPT_PARAM_CAPABILITIES: u8 = 2;
const CAP_MULTIPROTOCOL: u8 = 1;

/// NOTIFICATION error codes used by the speaker.
pub mod notify {
    pub const MESSAGE_HEADER_ERROR: u8 = 1;
    pub const OPEN_MESSAGE_ERROR: u8 = 2;
    pub const UPDATE_MESSAGE_ERROR: u8 = 3;
    pub const HOLD_TIMER_EXPIRED: u8 = 4;
    pub const FSM_ERROR: u8 = 5;
    pub const CEASE: u8 = 6;

    pub const OPEN_BAD_PEER_AS: u8 = 2;
    pub const OPEN_UNSUPPORTED_CAPABILITY: u8 = 7;
    pub const UPDATE_MALFORMED_ATTRIBUTE_LIST: u8 = 1;
}

/// Prepends the common header to a message body.
pub fn frame(msg_type: u8, body: &[u8]) -> Vec<u8> {
    let len = HEADER_LEN + body.len();
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&MARKER);
    out.extend_from_slice(&(len as u16).to_be_bytes());
    out.push(msg_type);
    out.extend_from_slice(body);
    out
}

/// Validates the header of a complete message and returns (type, body).
pub fn split_header(msg: &[u8]) -> Result<(u8, &[u8]), CodecError> {
    if msg.len() < HEADER_LEN {
        return Err(CodecError::Malformed("message shorter than header".into()));
    }
    if msg[..16] != MARKER {
        return Err(CodecError::Malformed("bad marker".into()));
    }
    let len = usize::from(u16::from_be_bytes([msg[16], msg[17]]));
    if len != msg.len() || len > MAX_MESSAGE_LEN {
        return Err(CodecError::Malformed(format!(
            "header length {len} does not match message of {} bytes",
            msg.len()
        )));
    }
    Ok((msg[18], &msg[HEADER_LEN..]))
}

/// Reads one full message (header included) from `r`.
pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> Result<Vec<u8>, CodecError> {
    let mut hdr = [0u8; HEADER_LEN];
    r.read_exact(&mut hdr).await?;
    if hdr[..16] != MARKER {
        return Err(CodecError::Malformed("bad marker".into()));
    }
    let len = usize::from(u16::from_be_bytes([hdr[16], hdr[17]]));
    if !(HEADER_LEN..=MAX_MESSAGE_LEN).contains(&len) {
        return Err(CodecError::Malformed(format!("bad message length {len}")));
    }
    let mut msg = vec![0u8; len];
    msg[..HEADER_LEN].copy_from_slice(&hdr);
    r.read_exact(&mut msg[HEADER_LEN..]).await?;
    Ok(msg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenMessage {
    pub version: u8,
    pub asn: u16,
    pub hold_time: u16,
    pub bgp_id: Ipv4Addr,
    /// (AFI, SAFI) pairs from multiprotocol capabilities.
    pub multiprotocol: Vec<(u16, u8)>,
}

impl OpenMessage {
    pub fn evpn(asn: u16, hold_time: u16, bgp_id: Ipv4Addr) -> Self {
        Self { version: 4, asn, hold_time, bgp_id, multiprotocol: vec![(AFI_L2VPN, SAFI_EVPN)] }
    }

    pub fn supports_evpn(&self) -> bool {
        self.multiprotocol.contains(&(AFI_L2VPN, SAFI_EVPN))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut caps = Vec::new();
        for (afi, safi) in &self.multiprotocol {
            caps.extend_from_slice(&[CAP_MULTIPROTOCOL, 4]);
            caps.extend_from_slice(&afi.to_be_bytes());
            caps.extend_from_slice(&[0, *safi]);
        }
        let mut body = vec![self.version];
        body.extend_from_slice(&self.asn.to_be_bytes());
        body.extend_from_slice(&self.hold_time.to_be_bytes());
        body.extend_from_slice(&self.bgp_id.octets());
        if caps.is_empty() {
            body.push(0);
        } else {
            body.push((caps.len() + 2) as u8);
            body.push(OPT_PARAM_CAPABILITIES);
            body.push(caps.len() as u8);
            body.extend_from_slice(&caps);
        }
        frame(MSG_OPEN, &body)
    }

    pub fn parse(body: &[u8]) -> Result<Self, CodecError> {
        if body.len() < 10 {
            return Err(CodecError::Malformed("OPEN too short".into()));
        }
        let opt_len = usize::from(body[9]);
        let opts = body
            .get(10..10 + opt_len)
            .ok_or_else(|| CodecError::Malformed("OPEN optional parameters truncated".into()))?;
        let mut multiprotocol = Vec::new();
        let mut p = opts;
        while !p.is_empty() {
            if p.len() < 2 || p.len() < 2 + usize::from(p[1]) {
                return Err(CodecError::Malformed("OPEN parameter truncated".into()));
            }
            let (ty, val) = (p[0], &p[2..2 + usize::from(p[1])]);
            if ty == OPT_PARAM_CAPABILITIES {
                let mut c = val;
                while !c.is_empty() {
                    if c.len() < 2 || c.len() < 2 + usize::from(c[1]) {
                        return Err(CodecError::Malformed("capability truncated".into()));
                    }
                    let (code, cval) = (c[0], &c[2..2 + usize::from(c[1])]);
                    if code == CAP_MULTIPROTOCOL && cval.len() == 4 {
                        multiprotocol.push((u16::from_be_bytes([cval[0], cval[1]]), cval[3]));
                    }
                    c = &c[2 + cval.len()..];
                }
            }
            p = &p[2 + val.len()..];
        }
        Ok(Self {
            version: body[0],
            asn: u16::from_be_bytes([body[1], body[2]]),
            hold_time: u16::from_be_bytes([body[3], body[4]]),
            bgp_id: Ipv4Addr::new(body[5], body[6], body[7], body[8]),
            multiprotocol,
        })
    }
}

pub fn keepalive() -> Vec<u8> {
    frame(MSG_KEEPALIVE, &[])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub code: u8,
    pub subcode: u8,
    pub data: Vec<u8>,
}

impl Notification {
    pub fn new(code: u8, subcode: u8) -> Self {
        Self { code, subcode, data: Vec::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = vec![self.code, self.subcode];
        body.extend_from_slice(&self.data);
        frame(MSG_NOTIFICATION, &body)
    }

    pub fn parse(body: &[u8]) -> Result<Self, CodecError> {
        if body.len() < 2 {
            return Err(CodecError::Malformed("NOTIFICATION too short".into()));
        }
        Ok(Self { code: body[0], subcode: body[1], data: body[2..].to_vec() })
    }
}
