// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr};

use evpn_core::bgp::{EvpnRoute, PathAttributes};
use evpn_core::model::{
    derive_rd_rt, EthernetSegmentId, EviRecord, EviState, MacAddr, MplsLabel, RouteDistinguisher, RouteTarget,
    RoutingPolicy,
};

pub fn mac_routes(n: usize) -> Vec<EvpnRoute> {
    (0..n as u64)
        .map(|i| EvpnRoute::MacIp {
            rd: RouteDistinguisher::new(64512, 1),
            esi: EthernetSegmentId::ZERO,
            eth_tag: 0,
            mac: MacAddr::from_u64(0x0200_0000_0000 + i),
            ip: Some(IpAddr::V4(Ipv4Addr::from(0x0a00_0000 + i as u32))),
            labels: vec![MplsLabel::new(100_000).unwrap()],
        })
        .collect()
}

pub fn attrs() -> PathAttributes {
    PathAttributes::with_route_targets(Ipv4Addr::new(10, 0, 0, 1), [RouteTarget::new(64512, 1)])
}

pub fn record(id: u32, pes: usize) -> EviRecord {
    let (rd, rt) = derive_rd_rt(u64::from(id), 64512).unwrap();
    EviRecord {
        evi_id: id,
        customer_id: "c1".into(),
        virtual_network_id: format!("vn{id}"),
        sap_id: "sap1".into(),
        network_ids: BTreeSet::from([format!("net{id}")]),
        pe_ids: (1..=pes).map(|i| format!("pe{i}")).collect(),
        rd,
        rt,
        mpls_label: MplsLabel::new(100_000 + id).unwrap(),
        vni: 10_000 + id,
        rp_id: Some(1),
        state: EviState::Pending,
    }
}

pub fn policy() -> RoutingPolicy {
    RoutingPolicy {
        rp_id: 1,
        name: "bench".into(),
        allow_mac_advertisement: true,
        import_rts: BTreeSet::from([RouteTarget::new(64512, 100), RouteTarget::new(64512, 101)]),
        export_rts: BTreeSet::from([RouteTarget::new(64512, 100)]),
        max_mac_routes: Some(1000),
    }
}
