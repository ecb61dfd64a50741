// SPDX-License-Identifier: Apache-2.0

//! MP-BGP EVPN: NLRI codec, UPDATE framing, and the peering speaker.

pub mod evpn;
pub mod message;
pub mod queue;
pub mod session;
pub mod update;

use thiserror::Error;

pub use evpn::EvpnRoute;
pub use queue::{FlushPolicy, OutQueue};
pub use session::{
    PeerEvent, PeerEventSink, PeerHandle, SessionCounters, SessionState, Speaker, SpeakerConfig,
};
pub use update::{parse_update, serialize_update, serialize_withdrawal, ParsedUpdate, PathAttributes};

pub const AFI_L2VPN: u16 = 25;
pub const SAFI_EVPN: u8 = 70;
pub const DEFAULT_PORT: u16 = 1790;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
