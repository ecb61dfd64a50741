// SPDX-License-Identifier: Apache-2.0

//! EVPN orchestration: controller, BGP EVPN speaker, NETCONF-lite PE
//! configuration and a PE simulator for benchmarking.

pub mod alloc;
pub mod api;
pub mod arp;
pub mod bgp;
pub mod bus;
pub mod client;
pub mod controller;
pub mod harness;
pub mod inventory;
pub mod model;
pub mod netconf;
pub mod northbound;
pub mod peconf;
pub mod service;
pub mod sim;
pub mod trace;

pub use alloc::LabelAllocator;
pub use model::*;
