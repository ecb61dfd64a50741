// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

pub mod refdecode;

use std::collections::BTreeSet;
use std::future::Future;
use std::net::{IpAddr, Ipv4Addr};
use std::time::{Duration, Instant};

use evpn_core::api::{L2vpnRequest, RpRequest};
use evpn_core::bgp::{EvpnRoute, PathAttributes};
use evpn_core::harness::lab::network_id;
use evpn_core::harness::{Lab, LabConfig};
use evpn_core::inventory::PortInfo;
use evpn_core::model::{EthernetSegmentId, EviId, EviState, MacAddr, MplsLabel, RouteDistinguisher, RouteTarget};
use evpn_core::service::ServiceHandle;
use evpn_core::sim::PeSimulator;

pub const WAIT: Duration = Duration::from_secs(10);

/// Polls `cond` until it holds or `timeout` passes.
pub async fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

pub async fn wait_until_async<F: Future<Output = bool>>(timeout: Duration, mut cond: impl FnMut() -> F) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond().await {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

pub fn port(i: u64, network: usize) -> PortInfo {
    PortInfo {
        mac: MacAddr::from_u64(0x0200_0000_1000 + i),
        ip: Some(IpAddr::V4(Ipv4Addr::from(0x0a00_1000 + i as u32))),
        network_id: network_id(network),
    }
}

pub async fn lab(pes: usize, ports: Vec<PortInfo>) -> Lab {
    let lab = Lab::start(LabConfig { pes, networks: 32, ports, ..LabConfig::default() }).await.unwrap();
    lab.wait_established(WAIT).await.unwrap();
    lab
}

pub fn l2vpn_request(network: usize, pes: &[&str]) -> L2vpnRequest {
    L2vpnRequest {
        customer_id: "c1".into(),
        virtual_network_id: format!("vn{network}"),
        sap_id: "sap1".into(),
        network_ids: vec![network_id(network)],
        pe_ids: pes.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn rp_request(allow: bool) -> RpRequest {
    RpRequest {
        name: format!("allow-{allow}"),
        allow_mac_advertisement: allow,
        import_rts: Vec::new(),
        export_rts: Vec::new(),
        max_mac_routes: None,
    }
}

pub async fn deploy(svc: &ServiceHandle, network: usize, pes: &[&str]) -> EviId {
    let id = svc.create_l2vpn(l2vpn_request(network, pes), Instant::now()).await.unwrap();
    assert!(
        wait_until(WAIT, || svc.l2vpn(id).is_some_and(|d| d.record.state != EviState::Pending)).await,
        "EVI {id} never left pending"
    );
    assert_eq!(svc.l2vpn(id).unwrap().record.state, EviState::Deployed);
    id
}

pub async fn associate(svc: &ServiceHandle, evi: EviId, allow: bool) -> u32 {
    let rp = svc.create_rp(rp_request(allow), Instant::now()).await.unwrap();
    svc.associate_rp(evi, rp).await.unwrap();
    assert!(wait_until(WAIT, || svc.l2vpn(evi).is_some_and(|d| d.applied_rp_id == Some(rp))).await);
    rp
}

/// MAC/IP routes currently active at a simulator.
pub fn active_macs(sim: &PeSimulator) -> BTreeSet<MacAddr> {
    sim.active_routes().values().filter_map(|(r, _)| r.mac()).collect()
}

pub fn mac_withdrawals(sim: &PeSimulator) -> usize {
    sim.received_routes().iter().filter(|r| r.withdrawn && r.route.mac().is_some()).count()
}

pub fn imet_count(sim: &PeSimulator) -> usize {
    sim.received_routes()
        .iter()
        .filter(|r| !r.withdrawn && matches!(r.route, EvpnRoute::InclusiveMulticast { .. }))
        .count()
}

pub fn remote_mac_route(rd_num: u32, mac: MacAddr, ip: Option<IpAddr>) -> EvpnRoute {
    EvpnRoute::MacIp {
        rd: RouteDistinguisher::new(65001, rd_num),
        esi: EthernetSegmentId::ZERO,
        eth_tag: 0,
        mac,
        ip,
        labels: vec![MplsLabel::new(5000).unwrap()],
    }
}

pub fn attrs_for(sim: &PeSimulator, rts: impl IntoIterator<Item = RouteTarget>) -> PathAttributes {
    PathAttributes::with_route_targets(sim.router_id(), rts)
}
