// SPDX-License-Identifier: Apache-2.0

mod common;

use std::net::{IpAddr, Ipv4Addr};
use std::time::{Duration, Instant};

use common::*;
use evpn_core::arp::{ArpProxy, ArpQuery, ArpResult};
use evpn_core::bgp::EvpnRoute;
use evpn_core::harness::lab::network_id;
use evpn_core::model::{EviState, MacAddr, Origin, RouteDistinguisher, RouteTarget};
use evpn_core::service::ServiceError;

#[tokio::test]
async fn deployed_evi_reaches_both_pes_and_advertises_imet() {
    let lab = lab(2, Vec::new()).await;
    let svc = lab.controller.service();
    let evi = deploy(svc, 0, &["pe1", "pe2"]).await;
    for sim in &lab.sims {
        assert!(sim.running_evi_ids().contains(&evi), "{} lacks EVI", sim.id());
        assert!(wait_until(WAIT, || imet_count(sim) == 1).await);
    }
    // Nothing else shows up later.
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert!(lab.sims.iter().all(|s| imet_count(s) == 1));
    let doc = svc.l2vpn(evi).unwrap();
    assert_eq!(doc.record.vni, 10_000);
    assert!(doc.timing.netconf_ms > 0.0);
}

#[tokio::test]
async fn rejected_validation_leaves_no_trace() {
    let lab = lab(2, Vec::new()).await;
    let svc = lab.controller.service();
    lab.sims[1].fail_next_validate();
    let id = svc.create_l2vpn(l2vpn_request(1, &["pe1", "pe2"]), Instant::now()).await.unwrap();
    assert!(wait_until(WAIT, || svc.l2vpn(id).unwrap().record.state == EviState::Failed).await);
    assert!(svc.l2vpn(id).unwrap().failure.is_some());
    for sim in &lab.sims {
        assert!(!sim.running_evi_ids().contains(&id));
    }
    assert_eq!(svc.stats().txn_failures, 1);
}

#[tokio::test]
async fn policy_flips_gate_local_mac_advertisement() {
    let lab = lab(1, vec![port(1, 2), port(2, 2)]).await;
    let svc = lab.controller.service();
    let sim = &lab.sims[0];
    let evi = deploy(svc, 2, &["pe1"]).await;
    assert!(wait_until(WAIT, || imet_count(sim) == 1).await);

    associate(svc, evi, false).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert!(active_macs(sim).is_empty());

    let allow = associate(svc, evi, true).await;
    let expected = [port(1, 2).mac, port(2, 2).mac].into_iter().collect();
    assert!(wait_until(WAIT, || active_macs(sim) == expected).await);
    // Advertised with the EVI's label and route target.
    let doc = svc.l2vpn(evi).unwrap();
    for (route, attrs) in sim.active_routes().values() {
        if let EvpnRoute::MacIp { labels, rd, .. } = route {
            assert_eq!(labels, &vec![doc.record.mpls_label]);
            assert_eq!(*rd, doc.record.rd);
            assert!(attrs.route_targets().any(|rt| rt == doc.record.rt));
        }
    }

    let before = sim.received_routes().len();
    svc.associate_rp(evi, allow).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(sim.received_routes().len(), before, "re-association must be a no-op");

    associate(svc, evi, false).await;
    assert!(wait_until(WAIT, || mac_withdrawals(sim) == 2).await);
    assert!(active_macs(sim).is_empty());
}

#[tokio::test]
async fn endpoint_events_follow_policy() {
    let lab = lab(1, Vec::new()).await;
    let svc = lab.controller.service();
    let sim = &lab.sims[0];
    let evi = deploy(svc, 3, &["pe1"]).await;
    associate(svc, evi, true).await;
    let proxy = ArpProxy::new(svc.clone());

    let mac = MacAddr::from_u64(0x0200_0000_0abc);
    let ip: IpAddr = Ipv4Addr::new(10, 3, 0, 9).into();
    assert_eq!(proxy.on_vm_boot(mac, Some(ip), &network_id(3)).await.unwrap(), Some(evi));
    assert_eq!(proxy.on_vm_boot(mac, Some(ip), &network_id(3)).await.unwrap(), Some(evi));
    assert!(wait_until(WAIT, || active_macs(sim).contains(&mac)).await);
    tokio::time::sleep(Duration::from_millis(50)).await;
    let ads = sim.received_routes().iter().filter(|r| r.route.mac() == Some(mac)).count();
    assert_eq!(ads, 1, "second boot must not re-advertise");
    assert_eq!(svc.lookup_mac(mac, evi).unwrap().origin, Origin::Local);

    // Unmapped network: acknowledged, nothing learned.
    assert_eq!(svc.endpoint_up(MacAddr::from_u64(77), None, network_id(20)).await.unwrap(), None);
    assert_eq!(svc.stats().unmapped_endpoints, 1);

    svc.endpoint_down(mac, network_id(3)).await.unwrap();
    assert!(wait_until(WAIT, || mac_withdrawals(sim) == 1).await);
    assert!(svc.lookup_mac(mac, evi).is_none());
    let target_ip = Ipv4Addr::new(10, 3, 0, 9);
    assert_eq!(proxy.handle_arp_request(ArpQuery { target_ip, evi_id: evi }), ArpResult::Miss);
}

#[tokio::test]
async fn remote_routes_are_imported_by_route_target() {
    let lab = lab(2, Vec::new()).await;
    let svc = lab.controller.service();
    let evi = deploy(svc, 4, &["pe1", "pe2"]).await;
    let other = deploy(svc, 5, &["pe1", "pe2"]).await;
    let rt = svc.l2vpn(evi).unwrap().record.rt;
    let sim = &lab.sims[1];

    let mac = MacAddr::from_u64(0x0400_0000_0001);
    let ip: IpAddr = Ipv4Addr::new(10, 0, 0, 5).into();
    let route = remote_mac_route(1, mac, Some(ip));
    sim.stage_route(route.clone(), attrs_for(sim, [rt]));
    assert!(wait_until(WAIT, || svc.lookup_mac(mac, evi).is_some()).await);
    let entry = svc.lookup_mac(mac, evi).unwrap();
    assert_eq!(entry.origin, Origin::Remote);
    assert_eq!(entry.path_list, vec!["pe2".to_string()]);
    assert!(svc.lookup_mac(mac, other).is_none());

    // Same IP in another EVI: each query is answered from its own EVI.
    let other_mac = MacAddr::from_u64(0x0400_0000_0002);
    let other_rt = svc.l2vpn(other).unwrap().record.rt;
    sim.stage_route(remote_mac_route(2, other_mac, Some(ip)), attrs_for(sim, [other_rt]));
    assert!(wait_until(WAIT, || svc.lookup_mac(other_mac, other).is_some()).await);
    assert_eq!(svc.arp_query(evi, ip).mac, Some(mac));
    assert_eq!(svc.arp_query(other, ip).mac, Some(other_mac));
    assert_eq!(svc.arp_query(evi, "10.9.9.9".parse().unwrap()).mac, None);

    // Unknown RT: counted, not stored.
    let stray = MacAddr::from_u64(0x0400_0000_0003);
    sim.stage_route(remote_mac_route(3, stray, None), attrs_for(sim, [RouteTarget::new(1, 1)]));
    assert!(wait_until(WAIT, || svc.stats().filtered == 1).await);
    assert!(svc.lookup_mac(stray, evi).is_none());

    sim.withdraw_route(&route);
    assert!(wait_until(WAIT, || svc.lookup_mac(mac, evi).is_none()).await);
    assert_eq!(svc.arp_query(evi, ip).mac, None);

    // Type 3 from a PE adds it to the participating set for the VNI.
    let vni = svc.l2vpn(evi).unwrap().record.vni;
    let imet = EvpnRoute::InclusiveMulticast {
        rd: RouteDistinguisher::new(65002, 9),
        eth_tag: vni,
        originating_ip: sim.router_id().into(),
    };
    sim.stage_route(imet.clone(), attrs_for(sim, [rt]));
    assert!(wait_until(WAIT, || svc.participating_pes(vni).contains("pe2")).await);
    sim.withdraw_route(&imet);
    assert!(wait_until(WAIT, || svc.participating_pes(vni).is_empty()).await);
}

#[tokio::test]
async fn local_entry_wins_over_remote_route() {
    let lab = lab(1, vec![port(9, 6)]).await;
    let svc = lab.controller.service();
    let evi = deploy(svc, 6, &["pe1"]).await;
    let rt = svc.l2vpn(evi).unwrap().record.rt;
    let sim = &lab.sims[0];
    sim.stage_route(remote_mac_route(1, port(9, 6).mac, None), attrs_for(sim, [rt]));
    assert!(wait_until(WAIT, || svc.stats().local_wins == 1).await);
    assert_eq!(svc.lookup_mac(port(9, 6).mac, evi).unwrap().origin, Origin::Local);
}

#[tokio::test]
async fn delete_withdraws_routes_and_removes_config() {
    let ports = vec![port(1, 7), port(2, 7), port(3, 7)];
    let lab = lab(2, ports.clone()).await;
    let svc = lab.controller.service();
    let evi = deploy(svc, 7, &["pe1", "pe2"]).await;
    associate(svc, evi, true).await;
    for sim in &lab.sims {
        assert!(wait_until(WAIT, || active_macs(sim).len() == 3).await);
    }
    svc.delete_l2vpn(evi).await.unwrap();
    for sim in &lab.sims {
        assert!(wait_until(WAIT, || mac_withdrawals(sim) == 3).await);
        assert!(!sim.running_evi_ids().contains(&evi));
        assert!(wait_until(WAIT, || sim.active_routes().is_empty()).await);
    }
    assert!(svc.l2vpn(evi).is_none());
    assert_eq!(svc.delete_l2vpn(evi).await, Err(ServiceError::NotFound(format!("l2vpn {evi}"))));
    // The network and VNI are free again.
    deploy(svc, 7, &["pe1"]).await;
}

#[tokio::test]
async fn conflicting_requests_are_refused() {
    let lab = lab(1, Vec::new()).await;
    let svc = lab.controller.service();
    let evi = deploy(svc, 8, &["pe1"]).await;
    let again = svc.create_l2vpn(l2vpn_request(8, &["pe1"]), Instant::now()).await;
    assert!(matches!(again, Err(ServiceError::Conflict(_))));
    let bad = svc.create_l2vpn(l2vpn_request(9, &["peX"]), Instant::now()).await;
    assert!(matches!(bad, Err(ServiceError::Invalid { field: Some(f), .. }) if f == "pe_ids[0]"));
    assert!(matches!(svc.associate_rp(evi, 99).await, Err(ServiceError::NotFound(_))));
    assert!(matches!(svc.associate_rp(999, 1).await, Err(ServiceError::NotFound(_))));

    lab.sims[0].set_latency(evpn_core::sim::SimLatencyProfile::new(0.0, 300.0, 0.0));
    let slow = svc.create_l2vpn(l2vpn_request(10, &["pe1"]), Instant::now()).await.unwrap();
    assert!(matches!(svc.delete_l2vpn(slow).await, Err(ServiceError::Conflict(_))));
}

#[tokio::test]
async fn label_is_released_after_delete() {
    let lab = lab(1, Vec::new()).await;
    let svc = lab.controller.service();
    let a = deploy(svc, 11, &["pe1"]).await;
    let label = svc.l2vpn(a).unwrap().record.mpls_label;
    svc.delete_l2vpn(a).await.unwrap();
    let b = deploy(svc, 12, &["pe1"]).await;
    assert_ne!(a, b);
    assert_eq!(svc.l2vpn(b).unwrap().record.mpls_label, label);
}
