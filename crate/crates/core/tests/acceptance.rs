// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion. Failures
//! only fail the process when `EVPN_ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::refdecode::{decode_update, Rd, RefRoute};
use common::{attrs_for, remote_mac_route, wait_until, WAIT};
use evpn_core::arp::{ArpProxy, ArpQuery, ArpResult};
use evpn_core::bgp::message::{read_message, split_header, OpenMessage, MSG_UPDATE};
use evpn_core::bgp::session::handshake;
use evpn_core::bgp::{
    parse_update, serialize_update, serialize_withdrawal, EvpnRoute, PathAttributes, SessionState,
    Speaker, SpeakerConfig,
};
use evpn_core::harness::lab::{network_id, pe_id};
use evpn_core::harness::*;
use evpn_core::model::{
    EthernetSegmentId, EviId, EviState, MacAddr, MplsLabel, Origin, RouteDistinguisher, RouteTarget,
};
use evpn_core::netconf::xml::Element;
use evpn_core::peconf::render_evi_config;
use evpn_core::service::ServiceHandle;
use evpn_core::sim::{ControlClient, ControlRequest, PeSimulator, SimLatencyProfile};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tokio::net::TcpListener;
use tokio::runtime::Runtime;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, Box<dyn Fn(&Runtime) -> Outcome>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ids(n: usize, f: fn(usize) -> String) -> Vec<String> {
    (0..n).map(f).collect()
}

// ---------------------------------------------------------------- 1: codec

fn arb_rd() -> impl Strategy<Value = RouteDistinguisher> {
    (any::<u16>(), any::<u32>()).prop_map(|(a, n)| RouteDistinguisher::new(a, n))
}

fn arb_ip() -> impl Strategy<Value = IpAddr> {
    prop_oneof![
        any::<[u8; 4]>().prop_map(|b| IpAddr::V4(Ipv4Addr::from(b))),
        any::<[u8; 16]>().prop_map(|b| IpAddr::V6(Ipv6Addr::from(b))),
    ]
}

fn arb_label() -> impl Strategy<Value = MplsLabel> {
    (0..=MplsLabel::MAX).prop_map(|v| MplsLabel::new(v).unwrap())
}

fn arb_route() -> impl Strategy<Value = EvpnRoute> {
    let esi = any::<[u8; 10]>().prop_map(EthernetSegmentId);
    prop_oneof![
        (arb_rd(), esi.clone(), any::<u32>(), arb_label())
            .prop_map(|(rd, esi, eth_tag, label)| EvpnRoute::EthernetAd { rd, esi, eth_tag, label }),
        (
            arb_rd(),
            esi.clone(),
            any::<u32>(),
            any::<[u8; 6]>(),
            proptest::option::of(arb_ip()),
            proptest::collection::vec(arb_label(), 1..=2)
        )
            .prop_map(|(rd, esi, eth_tag, mac, ip, labels)| EvpnRoute::MacIp {
                rd,
                esi,
                eth_tag,
                mac: MacAddr(mac),
                ip,
                labels
            }),
        (arb_rd(), any::<u32>(), arb_ip()).prop_map(|(rd, eth_tag, originating_ip)| {
            EvpnRoute::InclusiveMulticast { rd, eth_tag, originating_ip }
        }),
        (arb_rd(), esi, arb_ip())
            .prop_map(|(rd, esi, originating_ip)| EvpnRoute::EthernetSegment { rd, esi, originating_ip }),
    ]
}

fn ip_bytes(ip: &IpAddr) -> Vec<u8> {
    match ip {
        IpAddr::V4(a) => a.octets().to_vec(),
        IpAddr::V6(a) => a.octets().to_vec(),
    }
}

fn to_ref(r: &EvpnRoute) -> RefRoute {
    let rd = |rd: &RouteDistinguisher| Rd { admin: rd.asn, number: rd.assigned_number };
    match r {
        EvpnRoute::EthernetAd { rd: d, esi, eth_tag, label } => {
            RefRoute::EthAd { rd: rd(d), esi: esi.0, tag: *eth_tag, label: label.value() }
        }
        EvpnRoute::MacIp { rd: d, esi, eth_tag, mac, ip, labels } => RefRoute::MacIp {
            rd: rd(d),
            esi: esi.0,
            tag: *eth_tag,
            mac: mac.0,
            ip: ip.as_ref().map(ip_bytes).unwrap_or_default(),
            labels: labels.iter().map(|l| l.value()).collect(),
        },
        EvpnRoute::InclusiveMulticast { rd: d, eth_tag, originating_ip } => {
            RefRoute::Imet { rd: rd(d), tag: *eth_tag, ip: ip_bytes(originating_ip) }
        }
        EvpnRoute::EthernetSegment { rd: d, esi, originating_ip } => {
            RefRoute::Es { rd: rd(d), esi: esi.0, ip: ip_bytes(originating_ip) }
        }
    }
}

/// Compares a batch against the crate parser and the reference decoder.
fn check_batch(routes: &[EvpnRoute], rts: &[RouteTarget]) -> Result<(), TestCaseError> {
    let attrs = PathAttributes::with_route_targets(Ipv4Addr::new(192, 0, 2, 1), rts.iter().copied());
    let msgs = serialize_update(routes, &attrs).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let (mut parsed, mut decoded) = (Vec::new(), Vec::new());
    for m in &msgs {
        prop_assert!(m.len() <= 4096);
        let p = parse_update(m).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(p.attrs.as_ref(), Some(&attrs));
        parsed.extend(p.advertised);
        let r = decode_update(m).map_err(|e| TestCaseError::fail(format!("reference decoder: {e}")))?;
        prop_assert_eq!(&r.next_hop, &vec![192, 0, 2, 1]);
        let want: Vec<(u16, u32)> = rts.iter().map(|rt| (rt.asn, rt.local_admin)).collect();
        prop_assert_eq!(&r.route_targets, &want);
        decoded.extend(r.reach);
    }
    prop_assert_eq!(&parsed, &routes.to_vec());
    prop_assert_eq!(decoded, routes.iter().map(to_ref).collect::<Vec<_>>());

    let mut withdrawn = Vec::new();
    for m in serialize_withdrawal(routes).map_err(|e| TestCaseError::fail(e.to_string()))? {
        let r = decode_update(&m).map_err(|e| TestCaseError::fail(format!("reference decoder: {e}")))?;
        prop_assert!(r.reach.is_empty());
        withdrawn.extend(parse_update(&m).map_err(|e| TestCaseError::fail(e.to_string()))?.withdrawn);
    }
    prop_assert_eq!(&withdrawn, &routes.to_vec());
    Ok(())
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let total = std::cell::Cell::new(0usize);
    let mut runner = TestRunner::new(PtConfig { cases: 1000, max_shrink_iters: 200, failure_persistence: None, ..PtConfig::default() });
    let strategy = (
        proptest::collection::vec(arb_route(), 1..30),
        proptest::collection::vec((any::<u16>(), any::<u32>()).prop_map(|(a, n)| RouteTarget::new(a, n)), 1..4),
    );
    // 1000 batches averaging ~15 routes.
    runner
        .run(&strategy, |(routes, rts)| {
            total.set(total.get() + routes.len());
            check_batch(&routes, &rts)
        })
        .map_err(|e| e.to_string())?;
    ensure!(total.get() >= 10_000, "only {} routes generated", total.get());
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{} routes round-tripped and accepted by the reference decoder in {elapsed:.2?}", total.get()))
}

// ---------------------------------------------------------- 2: deployment

fn evpn_entries(root: &Element) -> BTreeMap<u32, Element> {
    root.find("evpn-instances")
        .map(|i| {
            i.find_all("evpn")
                .filter_map(|e| Some((e.find_text("evi")?.parse().ok()?, e.clone())))
                .collect()
        })
        .unwrap_or_default()
}

/// Compares every PE's running EVPN section with what the controller
/// state says it should hold.
fn datastore_diff(svc: &ServiceHandle, sims: &[PeSimulator], assignments: &BTreeMap<EviId, Vec<String>>) -> Vec<String> {
    let mut problems = Vec::new();
    for sim in sims {
        let actual = evpn_entries(&sim.running());
        let mut expected = BTreeMap::new();
        for (evi, pes) in assignments {
            if !pes.iter().any(|p| p == sim.id()) {
                continue;
            }
            let Some(doc) = svc.l2vpn(*evi) else {
                problems.push(format!("EVI {evi} missing from controller"));
                continue;
            };
            let rp = doc.applied_rp_id.and_then(|id| svc.rp(id)).map(|r| r.policy);
            let rendered = render_evi_config(&doc.record, rp.as_ref(), sim.id()).unwrap().element();
            expected.extend(evpn_entries(&rendered));
        }
        for (evi, want) in &expected {
            match actual.get(evi) {
                None => problems.push(format!("{}: EVI {evi} absent", sim.id())),
                Some(got) if got != want => problems.push(format!("{}: EVI {evi} differs", sim.id())),
                _ => {}
            }
        }
        for evi in actual.keys().filter(|e| !expected.contains_key(e)) {
            problems.push(format!("{}: unexpected EVI {evi}", sim.id()));
        }
    }
    problems
}

async fn criterion_2() -> Outcome {
    let started = Instant::now();
    let n = 1000;
    let networks = n + DeployConfig::default().warmup;
    let lab = Lab::start(LabConfig { pes: 4, networks, ..LabConfig::default() }).await.map_err(|e| e.to_string())?;
    lab.wait_established(WAIT).await.map_err(|e| e.to_string())?;
    let cfg = DeployConfig { n, inter_request_delay: Duration::from_millis(50), ..DeployConfig::default() };
    let report = run_deployment_bench(&lab.client(), &ids(networks, network_id), &ids(4, pe_id), &cfg)
        .await
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure!(report.partial.is_none(), "partial run: {:?}", report.partial);
    ensure!(report.rows.len() == n, "{} rows", report.rows.len());
    let svc = lab.controller.service();
    let deployed = report
        .rows
        .iter()
        .filter(|r| svc.l2vpn(r.evi_id).is_some_and(|d| d.record.state == EviState::Deployed))
        .count();
    ensure!(deployed == n, "{deployed}/{n} deployed");
    let rollbacks = svc.stats().txn_failures;
    ensure!(rollbacks == 0, "{rollbacks} rollbacks");
    let problems = datastore_diff(svc, &lab.sims, &report.assignments);
    ensure!(problems.is_empty(), "datastore diff: {:?}", &problems[..problems.len().min(5)]);
    ensure!(elapsed < Duration::from_secs(180), "took {elapsed:?}");
    Ok(format!("{deployed}/{n} deployed, 0 rollbacks, datastores match on 4 PEs, {elapsed:.1?} at 0.05 s delay"))
}

// ------------------------------------------------------ 3: stage dominance

async fn criterion_3() -> Outcome {
    let lab = Lab::start(LabConfig {
        pes: 2,
        networks: 105,
        latency: SimLatencyProfile::new(20.0, 30.0, 50.0),
        ..LabConfig::default()
    })
    .await
    .map_err(|e| e.to_string())?;
    lab.wait_established(WAIT).await.map_err(|e| e.to_string())?;
    let cfg = DeployConfig { n: 100, inter_request_delay: Duration::ZERO, ..DeployConfig::default() };
    let report = run_deployment_bench(&lab.client(), &ids(105, network_id), &ids(2, pe_id), &cfg)
        .await
        .map_err(|e| e.to_string())?;
    ensure!(report.partial.is_none(), "partial run: {:?}", report.partial);
    let s = report.summary.ok_or("no summary")?;
    let (nc, l2, rp) = (s.netconf_ms.mean, s.l2vpn_ms.mean, s.rp_ms.mean);
    ensure!(nc > 5.0 * l2 && nc > 5.0 * rp, "netconf {nc:.3} ms, l2vpn {l2:.3} ms, rp {rp:.3} ms");
    Ok(format!("mean netconf {nc:.1} ms vs l2vpn {l2:.3} ms, rp {rp:.3} ms over 100 EVIs"))
}

// ------------------------------------------------------------- 4: rollback

async fn criterion_4() -> Outcome {
    let lab = Lab::start(LabConfig { pes: 4, networks: 100, ..LabConfig::default() }).await.map_err(|e| e.to_string())?;
    lab.wait_established(WAIT).await.map_err(|e| e.to_string())?;
    let svc = lab.controller.service();
    let mut rng = StdRng::seed_from_u64(4);
    let mut leaks = 0;
    let mut not_failed = 0;
    for run in 0..100 {
        let mut pes = ids(4, pe_id);
        pes.shuffle(&mut rng);
        pes.truncate(rng.gen_range(2..=4));
        let victim = pes[rng.gen_range(0..pes.len())].clone();
        for sim in &lab.sims {
            sim.set_latency(SimLatencyProfile { jitter_ms: rng.gen_range(0.0..3.0), ..SimLatencyProfile::default() });
        }
        let sim = lab.sim(&victim).unwrap();
        let mut ctl = ControlClient::connect(sim.control_addr()).await.map_err(|e| e.to_string())?;
        let resp = ctl.request(&ControlRequest::FailNextValidate).await.map_err(|e| e.to_string())?;
        ensure!(resp.ok, "control channel refused: {:?}", resp.error);

        let req = evpn_core::api::L2vpnRequest {
            customer_id: format!("c{run}"),
            virtual_network_id: format!("vn{run}"),
            sap_id: "sap".into(),
            network_ids: vec![network_id(run)],
            pe_ids: pes.clone(),
        };
        let evi = svc.create_l2vpn(req, Instant::now()).await.map_err(|e| e.to_string())?;
        let settled = wait_until(WAIT, || svc.l2vpn(evi).is_some_and(|d| d.record.state != EviState::Pending)).await;
        ensure!(settled, "run {run}: EVI {evi} stuck pending");
        if svc.l2vpn(evi).unwrap().record.state != EviState::Failed {
            not_failed += 1;
        }
        leaks += lab.sims.iter().filter(|s| s.running_evi_ids().contains(&evi)).count();
    }
    ensure!(leaks == 0, "{leaks} running datastores kept a rolled-back EVI");
    ensure!(not_failed == 0, "{not_failed} transactions committed despite the scripted failure");
    Ok("100 runs, every transaction rolled back, no running datastore holds its EVI".into())
}

// ------------------------------------------------------------- 5: queueing

async fn criterion_5() -> Outcome {
    let g = GeneratorLab::start(true).await.map_err(|e| e.to_string())?;
    let (mut wbt, mut uq, mut q) = (Vec::new(), Vec::new(), Vec::new());
    let mut seed = 0x0a00_0000_0000u64;
    for _ in 0..5 {
        let one = GeneratorConfig { mac_seed: seed, ..GeneratorConfig::new(GenMode::OneByOne, 100, g.bgp_addr, g.route_target) };
        seed += 0x1000;
        uq.push(run_generator(&one).await.map_err(|e| e.to_string())?.rtts());
        let w = collect_wbt(g.lab.controller.tracer(), &one.measured_macs());
        ensure!(w.records.len() == 100, "{} whitebox records", w.records.len());
        wbt.push(w.records.iter().map(|r| r.pipeline_ms).collect::<Vec<_>>());
        let burst = GeneratorConfig { mac_seed: seed, ..GeneratorConfig::new(GenMode::Burst, 100, g.bgp_addr, g.route_target) };
        seed += 0x1000;
        q.push(run_generator(&burst).await.map_err(|e| e.to_string())?.rtts());
    }
    let dir = std::env::temp_dir().join("evpn-acceptance-rtt");
    let (_, w) = emit_rtt_report(&dir, "wbt", &wbt).map_err(|e| e.to_string())?;
    let (_, u) = emit_rtt_report(&dir, "bbt_uq", &uq).map_err(|e| e.to_string())?;
    let (_, b) = emit_rtt_report(&dir, "bbt_q", &q).map_err(|e| e.to_string())?;
    let detail = format!(
        "pooled means WBT {:.3} ms, BBT-UQ {:.3} ms, BBT-Q {:.3} ms; medians BBT-UQ {:.3} ms, BBT-Q {:.3} ms",
        w.pooled.mean, u.pooled.mean, b.pooled.mean, u.pooled.median, b.pooled.median
    );
    ensure!(w.pooled.mean <= u.pooled.mean && u.pooled.mean <= b.pooled.mean, "{detail}");
    ensure!(b.pooled.median >= u.pooled.median, "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------- 6: batching

async fn criterion_6() -> Outcome {
    let (tx, _rx) = tokio::sync::mpsc::unbounded_channel();
    let speaker = Speaker::new(SpeakerConfig::default(), Arc::new(tx), None);
    let l = TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let peer = speaker.connect("raw", l.local_addr().unwrap());
    let (mut s, _) = l.accept().await.map_err(|e| e.to_string())?;
    handshake(&mut s, &OpenMessage::evpn(65001, 90, Ipv4Addr::new(10, 9, 9, 9)), WAIT)
        .await
        .map_err(|e| e.to_string())?;
    ensure!(peer.wait_for(SessionState::Established, WAIT).await, "session not established");

    let route = |i: u64| remote_mac_route(1, MacAddr::from_u64(0x0200_0000_0000 + i), None);
    let attrs = |rt: u32| Arc::new(PathAttributes::with_route_targets(Ipv4Addr::LOCALHOST, [RouteTarget::new(64512, rt)]));

    async fn count_updates(s: &mut tokio::net::TcpStream, routes: usize) -> Result<usize, String> {
        let (mut seen, mut updates) = (0, 0);
        while seen < routes {
            let m = tokio::time::timeout(WAIT, read_message(s)).await.map_err(|_| "timeout")?.map_err(|e| e.to_string())?;
            if split_header(&m).map_err(|e| e.to_string())?.0 == MSG_UPDATE {
                updates += 1;
                seen += parse_update(&m).map_err(|e| e.to_string())?.advertised.len();
            }
        }
        Ok(updates)
    }

    let shared = attrs(1);
    let routes: Vec<_> = (0..100).map(route).collect();
    let t0 = Instant::now();
    for r in &routes {
        peer.enqueue_advertisement(r, shared.clone()).map_err(|e| e.to_string())?;
    }
    let spread = t0.elapsed();
    ensure!(spread < Duration::from_millis(1), "enqueueing took {spread:?}");
    let same = count_updates(&mut s, 100).await?;

    let sets = [attrs(1), attrs(2), attrs(3)];
    for i in 0..30u64 {
        peer.enqueue_advertisement(&route(1000 + i), sets[(i / 10) as usize].clone()).map_err(|e| e.to_string())?;
    }
    let distinct = count_updates(&mut s, 30).await?;
    ensure!(same <= 2, "{same} UPDATEs for 100 routes with identical attributes");
    ensure!(distinct >= 3, "{distinct} UPDATEs for 3 attribute sets");
    Ok(format!("100 routes in {spread:.0?} -> {same} UPDATE(s); 3 attribute sets -> {distinct} UPDATEs"))
}

// --------------------------------------------------------- 7: policy gating

#[derive(Debug, Clone)]
enum GateOp {
    Flip(bool),
    Up(u8),
    Down(u8),
}

fn arb_gate_ops() -> impl Strategy<Value = Vec<GateOp>> {
    proptest::collection::vec(
        prop_oneof![
            any::<bool>().prop_map(GateOp::Flip),
            (0u8..6).prop_map(GateOp::Up),
            (0u8..6).prop_map(GateOp::Down),
        ],
        1..16,
    )
}

/// Waits until the controller applied everything and the peer's log has
/// been still for a while (longer than the output queue's idle flush).
async fn settle(svc: &ServiceHandle, evi: EviId, sim: &PeSimulator) -> Result<(), String> {
    let applied = wait_until(WAIT, || {
        svc.l2vpn(evi).is_some_and(|d| d.record.state == EviState::Deployed && d.applied_rp_id == d.record.rp_id)
    })
    .await;
    ensure!(applied, "EVI {evi} did not settle: {:?}", svc.l2vpn(evi));
    let mut last = sim.received_routes().len();
    let mut still_since = Instant::now();
    while still_since.elapsed() < Duration::from_millis(60) {
        tokio::time::sleep(Duration::from_millis(5)).await;
        let now = sim.received_routes().len();
        if now != last {
            last = now;
            still_since = Instant::now();
        }
    }
    Ok(())
}

fn criterion_7(rt: &Runtime) -> Outcome {
    let cases = 40;
    let lab = rt
        .block_on(async {
            let lab = Lab::start(LabConfig { pes: 1, networks: cases + 1, ..LabConfig::default() }).await?;
            lab.wait_established(WAIT).await?;
            Ok::<_, HarnessError>(lab)
        })
        .map_err(|e| e.to_string())?;
    let svc = lab.controller.service().clone();
    let (allow, deny) = rt
        .block_on(async {
            Ok::<_, String>((
                svc.create_rp(common::rp_request(true), Instant::now()).await.map_err(|e| e.to_string())?,
                svc.create_rp(common::rp_request(false), Instant::now()).await.map_err(|e| e.to_string())?,
            ))
        })?;
    let sim = &lab.sims[0];
    let case = std::cell::Cell::new(0usize);
    let mut runner = TestRunner::new(PtConfig { cases: cases as u32, max_shrink_iters: 0, failure_persistence: None, ..PtConfig::default() });
    runner
        .run(&arb_gate_ops(), |ops| {
            let k = case.get();
            case.set(k + 1);
            rt.block_on(async {
                let evi = common::deploy(&svc, k, &["pe1"]).await;
                let mac = |i: u8| MacAddr::from_u64(0x0600_0000_0000 + ((k as u64) << 8) + u64::from(i));
                let mut model_up = BTreeSet::new();
                let mut model_allow = None;
                for op in &ops {
                    match op {
                        GateOp::Flip(a) => {
                            svc.associate_rp(evi, if *a { allow } else { deny }).await.unwrap();
                            model_allow = Some(*a);
                        }
                        GateOp::Up(i) => {
                            svc.endpoint_up(mac(*i), None, network_id(k)).await.unwrap();
                            model_up.insert(mac(*i));
                        }
                        GateOp::Down(i) => {
                            svc.endpoint_down(mac(*i), network_id(k)).await.unwrap();
                            model_up.remove(&mac(*i));
                        }
                    }
                }
                settle(&svc, evi, sim).await.map_err(TestCaseError::fail)?;

                // Gating function applied to controller state.
                let (rd, locals, allowed) = svc.with_tables(|t| {
                    let e = &t.evis[&evi];
                    let allowed = e.applied_rp_id.and_then(|id| t.rps.get(&id)).is_some_and(|r| r.policy.allow_mac_advertisement);
                    let locals: BTreeSet<MacAddr> =
                        t.macs_of(evi).filter(|m| m.origin == Origin::Local).map(|m| m.mac).collect();
                    (e.record.rd, locals, allowed)
                });
                let gated: BTreeSet<MacAddr> = if allowed { locals.clone() } else { BTreeSet::new() };
                let at_peer: BTreeSet<MacAddr> = sim
                    .active_routes()
                    .values()
                    .filter(|(r, _)| r.rd() == rd)
                    .filter_map(|(r, _)| r.mac())
                    .collect();
                prop_assert_eq!(&at_peer, &gated, "ops {:?}", ops);
                // The controller state itself follows the event sequence.
                prop_assert_eq!(&locals, &model_up);
                prop_assert_eq!(allowed, model_allow == Some(true));
                Ok(())
            })
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} random policy-flip/endpoint sequences, peer routes equal gated controller state"))
}

// ------------------------------------------------------------------ 8: ARP

async fn criterion_8() -> Outcome {
    let lab = Lab::start(LabConfig { pes: 1, networks: 2, ..LabConfig::default() }).await.map_err(|e| e.to_string())?;
    lab.wait_established(WAIT).await.map_err(|e| e.to_string())?;
    let svc = lab.controller.service();
    let evi = common::deploy(svc, 0, &["pe1"]).await;
    let rt = svc.l2vpn(evi).unwrap().record.rt;
    let sim = &lab.sims[0];
    let proxy = ArpProxy::new(svc.clone());

    let hosts: Vec<(MacAddr, Ipv4Addr)> = (0..500u32)
        .map(|i| (MacAddr::from_u64(0x0800_0000_0000 + u64::from(i)), Ipv4Addr::from(0x0a32_0000 + i)))
        .collect();
    let routes: Vec<EvpnRoute> =
        hosts.iter().enumerate().map(|(i, (m, ip))| remote_mac_route(i as u32, *m, Some((*ip).into()))).collect();
    for r in &routes {
        sim.stage_route(r.clone(), attrs_for(sim, [rt]));
    }
    // Barrier: a later route from the same peer has been processed.
    let barrier = |n: u64| MacAddr::from_u64(0x08ff_0000_0000 + n);
    sim.stage_route(remote_mac_route(9000, barrier(1), None), attrs_for(sim, [rt]));
    ensure!(wait_until(WAIT, || svc.lookup_mac(barrier(1), evi).is_some()).await, "routes not learned");

    let query = |hosts: &[(MacAddr, Ipv4Addr)]| {
        let before = proxy.counters();
        let correct = hosts
            .iter()
            .filter(|(m, ip)| proxy.handle_arp_request(ArpQuery { target_ip: *ip, evi_id: evi }) == ArpResult::Hit(*m))
            .count();
        let after = proxy.counters();
        (correct, after.hits - before.hits, after.misses - before.misses)
    };
    let (correct, hits, misses) = query(&hosts);
    ensure!(correct == 500 && hits == 500 && misses == 0, "learned: {correct} correct, {hits} hits, {misses} misses");

    for r in &routes {
        sim.withdraw_route(r);
    }
    sim.stage_route(remote_mac_route(9001, barrier(2), None), attrs_for(sim, [rt]));
    ensure!(wait_until(WAIT, || svc.lookup_mac(barrier(2), evi).is_some()).await, "withdrawals not processed");
    let (_, hits_after, misses_after) = query(&hosts);
    ensure!(hits_after == 0, "{hits_after} hits after withdrawal");
    Ok(format!("500 hits / 0 misses after learning; {hits_after} hits / {misses_after} misses after withdrawal"))
}

// ----------------------------------------------------------------- 9: IMET

fn criterion_9(rt: &Runtime) -> Outcome {
    let lab = rt
        .block_on(async {
            let lab = Lab::start(LabConfig { pes: 5, networks: 2, ..LabConfig::default() }).await?;
            lab.wait_established(WAIT).await?;
            Ok::<_, HarnessError>(lab)
        })
        .map_err(|e| e.to_string())?;
    let svc = lab.controller.service().clone();
    let pes = ids(5, pe_id);
    let pe_refs: Vec<&str> = pes.iter().map(String::as_str).collect();
    let evi = rt.block_on(common::deploy(&svc, 0, &pe_refs));
    let (vni, evi_rt) = svc.l2vpn(evi).map(|d| (d.record.vni, d.record.rt)).unwrap();

    // The full event log across all cases, folded by brute force.
    let log = std::cell::RefCell::new(Vec::<(usize, u8, bool)>::new());
    let barrier_seq = std::cell::Cell::new(0u64);
    let imet = |peer: usize, variant: u8| EvpnRoute::InclusiveMulticast {
        rd: RouteDistinguisher::new(65001 + peer as u16, 100 + u32::from(variant)),
        eth_tag: vni,
        originating_ip: lab.sims[peer].router_id().into(),
    };
    let cases = 40;
    let mut runner = TestRunner::new(PtConfig { cases, max_shrink_iters: 0, failure_persistence: None, ..PtConfig::default() });
    runner
        .run(&proptest::collection::vec((0usize..5, 0u8..3, any::<bool>()), 1..40), |events| {
            rt.block_on(async {
                for (peer, variant, advertise) in &events {
                    let sim = &lab.sims[*peer];
                    if *advertise {
                        sim.stage_route(imet(*peer, *variant), attrs_for(sim, [evi_rt]));
                    } else {
                        sim.withdraw_route(&imet(*peer, *variant));
                    }
                    log.borrow_mut().push((*peer, *variant, *advertise));
                }
                // Barrier on every peer session.
                let n = barrier_seq.get() + 1;
                barrier_seq.set(n);
                let marks: Vec<MacAddr> =
                    (0..5).map(|p| MacAddr::from_u64(0x0900_0000_0000 + (n << 8) + p)).collect();
                for (p, m) in marks.iter().enumerate() {
                    let sim = &lab.sims[p];
                    sim.stage_route(remote_mac_route(50_000 + n as u32, *m, None), attrs_for(sim, [evi_rt]));
                }
                let seen = wait_until(WAIT, || marks.iter().all(|m| svc.lookup_mac(*m, evi).is_some())).await;
                prop_assert!(seen, "barrier routes not learned");

                let mut active: HashMap<(usize, u8), bool> = HashMap::new();
                for (peer, variant, advertise) in log.borrow().iter() {
                    active.insert((*peer, *variant), *advertise);
                }
                let expected: BTreeSet<String> =
                    active.iter().filter(|(_, on)| **on).map(|((p, _), _)| pe_id(*p)).collect();
                prop_assert_eq!(svc.participating_pes(vni), expected);
                Ok(())
            })
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} random advertise/withdraw sequences from 5 peers, {} events, sets match the fold", log.borrow().len()))
}

// ------------------------------------------------------------------ main

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<Criterion> = vec![
        (1, "codec soundness", Box::new(|_| criterion_1())),
        (2, "deployment scale", Box::new(|rt| rt.block_on(criterion_2()))),
        (3, "stage dominance", Box::new(|rt| rt.block_on(criterion_3()))),
        (4, "transactional rollback", Box::new(|rt| rt.block_on(criterion_4()))),
        (5, "queueing ordering", Box::new(|rt| rt.block_on(criterion_5()))),
        (6, "batching", Box::new(|rt| rt.block_on(criterion_6()))),
        (7, "policy gating", Box::new(criterion_7)),
        (8, "ARP suppression", Box::new(|rt| rt.block_on(criterion_8()))),
        (9, "IMET consistency", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        let key = format!("criterion_{n}");
        if !filter.is_empty() && !filter.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        match run(&rt) {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}) [{:.1?}]", started.elapsed()),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({why}) [{:.1?}]", started.elapsed());
            }
        }
    }
    let strict = std::env::var_os("EVPN_ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
    }
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
