// SPDX-License-Identifier: Apache-2.0

//! Controller state tables. Mutated only by the service consumer; read via
//! snapshots by the northbound API and the ARP proxy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;
use std::time::Instant;

use serde::Serialize;
use tracing::{debug, info};

use crate::bgp::EvpnRoute;
use crate::model::{
    AuxMapping, EthernetSegmentId, EviId, EviRecord, LocalEncap, MacAddr, MacTableEntry,
    MplsLabel, Origin, PeId, RoutingPolicy, RpId,
};

/// Controller-side stage timings of one EVI, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EviTiming {
    /// Request receipt until its configuration transaction was submitted.
    pub l2vpn_ms: f64,
    /// Sum of the EVI's configuration transaction durations.
    pub netconf_ms: f64,
    /// Request receipt until the last policy association took effect.
    pub total_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EviEntry {
    pub record: EviRecord,
    pub applied_rp_id: Option<RpId>,
    pub failure: Option<String>,
    pub received_at: Instant,
    pub timing: EviTiming,
}

#[derive(Debug, Clone)]
pub struct RpEntry {
    pub policy: RoutingPolicy,
    /// Receipt until the policy was stored.
    pub rp_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteUpsert {
    Applied,
    /// A local entry exists for the same (MAC, EVI); the route was ignored.
    LocalWins,
}

#[derive(Debug, Default)]
pub struct Tables {
    pub evis: BTreeMap<EviId, EviEntry>,
    pub rps: BTreeMap<RpId, RpEntry>,
    /// Main table keyed by (EVI, MAC), which keeps (MAC, EVI) unique and
    /// groups each EVI's rows together.
    macs: BTreeMap<(EviId, MacAddr), MacTableEntry>,
    aux: BTreeMap<u32, AuxMapping>,
    network_evi: HashMap<String, EviId>,
    esi_routes: BTreeMap<EthernetSegmentId, BTreeMap<(PeId, EvpnRoute), EvpnRoute>>,
    /// Live type-3 routes per EVI and peer.
    imet: HashMap<EviId, BTreeMap<PeId, BTreeSet<EvpnRoute>>>,
    arp: HashMap<(EviId, IpAddr), MacAddr>,
}

impl Tables {
    pub fn evi_of_network(&self, network: &str) -> Option<EviId> {
        self.network_evi.get(network).copied()
    }

    pub fn vni_in_use(&self, vni: u32) -> Option<EviId> {
        self.aux.get(&vni).map(|a| a.evi_id)
    }

    /// Registers a new EVI together with its network and VNI mappings.
    pub fn insert_evi(&mut self, entry: EviEntry) {
        let r = &entry.record;
        for n in &r.network_ids {
            self.network_evi.insert(n.clone(), r.evi_id);
        }
        self.aux.insert(
            r.vni,
            AuxMapping {
                vni: r.vni,
                evi_id: r.evi_id,
                participating_pes: BTreeSet::new(),
                local_encap: LocalEncap::Vxlan(r.vni),
            },
        );
        self.evis.insert(r.evi_id, entry);
    }

    /// Drops an EVI and every row that belongs to it.
    pub fn remove_evi(&mut self, evi: EviId) -> Option<EviEntry> {
        let entry = self.evis.remove(&evi)?;
        self.network_evi.retain(|_, e| *e != evi);
        self.aux.retain(|_, a| a.evi_id != evi);
        let keys: Vec<_> = self.macs.range((evi, MacAddr([0; 6]))..=(evi, MacAddr([0xff; 6]))).map(|(k, _)| *k).collect();
        for k in keys {
            self.macs.remove(&k);
        }
        self.arp.retain(|(e, _), _| *e != evi);
        self.imet.remove(&evi);
        Some(entry)
    }

    pub fn lookup_mac(&self, mac: MacAddr, evi: EviId) -> Option<&MacTableEntry> {
        self.macs.get(&(evi, mac))
    }

    pub fn macs_of(&self, evi: EviId) -> impl Iterator<Item = &MacTableEntry> {
        self.macs.range((evi, MacAddr([0; 6]))..=(evi, MacAddr([0xff; 6]))).map(|(_, e)| e)
    }

    pub fn mac_entries(&self) -> impl Iterator<Item = &MacTableEntry> {
        self.macs.values()
    }

    /// Inserts or refreshes a local row; false when nothing changed.
    pub fn insert_local(
        &mut self,
        mac: MacAddr,
        ip: Option<IpAddr>,
        evi: EviId,
        label: MplsLabel,
        now: Instant,
    ) -> bool {
        if let Some(e) = self.macs.get(&(evi, mac)) {
            if e.origin == Origin::Local && e.ip == ip {
                return false;
            }
        }
        let old = self.macs.insert(
            (evi, mac),
            MacTableEntry {
                mac,
                ip,
                evi_id: evi,
                origin: Origin::Local,
                mpls_label: label,
                esi: EthernetSegmentId::ZERO,
                path_list: Vec::new(),
                learned_at: now,
            },
        );
        if let Some(old_ip) = old.and_then(|o| o.ip) {
            self.arp_unset(evi, old_ip, mac);
        }
        if let Some(ip) = ip {
            self.arp_set(evi, ip, mac);
        }
        true
    }

    pub fn remove_local(&mut self, mac: MacAddr, evi: EviId) -> bool {
        match self.macs.get(&(evi, mac)) {
            Some(e) if e.origin == Origin::Local => {}
            _ => return false,
        }
        let old = self.macs.remove(&(evi, mac)).unwrap();
        if let Some(ip) = old.ip {
            self.arp_unset(evi, ip, mac);
        }
        true
    }

    /// Adds `peer` to the path list of a remote row, creating it if needed.
    #[allow(clippy::too_many_arguments)]
    pub fn upsert_remote(
        &mut self,
        mac: MacAddr,
        ip: Option<IpAddr>,
        evi: EviId,
        label: MplsLabel,
        esi: EthernetSegmentId,
        peer: &str,
        now: Instant,
    ) -> RemoteUpsert {
        let old_ip = match self.macs.get_mut(&(evi, mac)) {
            Some(e) if e.origin == Origin::Local => {
                debug!(%mac, evi, peer, "remote route for a local MAC ignored");
                return RemoteUpsert::LocalWins;
            }
            Some(e) => {
                if let Err(pos) = e.path_list.binary_search_by(|p| p.as_str().cmp(peer)) {
                    e.path_list.insert(pos, peer.to_string());
                }
                let old = e.ip;
                e.ip = ip;
                e.mpls_label = label;
                e.esi = esi;
                old
            }
            None => {
                self.macs.insert(
                    (evi, mac),
                    MacTableEntry {
                        mac,
                        ip,
                        evi_id: evi,
                        origin: Origin::Remote,
                        mpls_label: label,
                        esi,
                        path_list: vec![peer.to_string()],
                        learned_at: now,
                    },
                );
                None
            }
        };
        if let Some(o) = old_ip.filter(|o| Some(*o) != ip) {
            self.arp_unset(evi, o, mac);
        }
        if let Some(ip) = ip {
            self.arp_set(evi, ip, mac);
        }
        RemoteUpsert::Applied
    }

    /// Removes `peer` from a remote row; the row goes once no path is left.
    pub fn remove_remote_path(&mut self, mac: MacAddr, evi: EviId, peer: &str) -> bool {
        let Some(e) = self.macs.get_mut(&(evi, mac)) else { return false };
        if e.origin != Origin::Remote {
            return false;
        }
        e.path_list.retain(|p| p != peer);
        if !e.path_list.is_empty() {
            return true;
        }
        let old = self.macs.remove(&(evi, mac)).unwrap();
        if let Some(ip) = old.ip {
            self.arp_unset(evi, ip, mac);
        }
        true
    }

    pub fn imet_add(&mut self, evi: EviId, peer: &str, key: EvpnRoute) {
        self.imet.entry(evi).or_default().entry(peer.to_string()).or_default().insert(key);
        self.sync_participants(evi);
    }

    pub fn imet_remove(&mut self, evi: EviId, peer: &str, key: &EvpnRoute) {
        if let Some(by_peer) = self.imet.get_mut(&evi) {
            if let Some(set) = by_peer.get_mut(peer) {
                set.remove(key);
                if set.is_empty() {
                    by_peer.remove(peer);
                }
            }
        }
        self.sync_participants(evi);
    }

    fn sync_participants(&mut self, evi: EviId) {
        let pes: BTreeSet<PeId> =
            self.imet.get(&evi).map(|m| m.keys().cloned().collect()).unwrap_or_default();
        if let Some(a) = self.aux.values_mut().find(|a| a.evi_id == evi) {
            a.participating_pes = pes;
        }
    }

    pub fn aux_mapping(&self, vni: u32) -> Option<&AuxMapping> {
        self.aux.get(&vni)
    }

    pub fn participating_pes(&self, vni: u32) -> BTreeSet<PeId> {
        self.aux.get(&vni).map(|a| a.participating_pes.clone()).unwrap_or_default()
    }

    pub fn esi_add(&mut self, peer: &str, route: EvpnRoute) {
        if let Some(esi) = esi_of(&route) {
            self.esi_routes.entry(esi).or_default().insert((peer.to_string(), route.key()), route);
        }
    }

    pub fn esi_remove(&mut self, peer: &str, route: &EvpnRoute) {
        if let Some(esi) = esi_of(route) {
            if let Some(m) = self.esi_routes.get_mut(&esi) {
                m.remove(&(peer.to_string(), route.key()));
                if m.is_empty() {
                    self.esi_routes.remove(&esi);
                }
            }
        }
    }

    pub fn esi_routes(&self, esi: &EthernetSegmentId) -> Vec<EvpnRoute> {
        self.esi_routes.get(esi).map(|m| m.values().cloned().collect()).unwrap_or_default()
    }

    pub fn arp_lookup(&self, evi: EviId, ip: IpAddr) -> Option<MacAddr> {
        self.arp.get(&(evi, ip)).copied()
    }

    fn arp_set(&mut self, evi: EviId, ip: IpAddr, mac: MacAddr) {
        if let Some(prev) = self.arp.insert((evi, ip), mac) {
            if prev != mac {
                info!(evi, %ip, old = %prev, new = %mac, "IP conflict, last writer wins");
            }
        }
    }

    fn arp_unset(&mut self, evi: EviId, ip: IpAddr, mac: MacAddr) {
        if self.arp.get(&(evi, ip)) != Some(&mac) {
            return;
        }
        self.arp.remove(&(evi, ip));
        // Another row of the EVI may still claim the address.
        let other = self.macs_of(evi).filter(|e| e.ip == Some(ip)).max_by_key(|e| e.learned_at);
        if let Some(e) = other {
            let m = e.mac;
            self.arp.insert((evi, ip), m);
        }
    }
}

fn esi_of(route: &EvpnRoute) -> Option<EthernetSegmentId> {
    match route {
        EvpnRoute::EthernetAd { esi, .. } | EvpnRoute::EthernetSegment { esi, .. } => Some(*esi),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_rd_rt, EviState};

    fn entry(evi: EviId, vni: u32) -> EviEntry {
        let (rd, rt) = derive_rd_rt(u64::from(evi), 64512).unwrap();
        EviEntry {
            record: EviRecord {
                evi_id: evi,
                customer_id: String::new(),
                virtual_network_id: String::new(),
                sap_id: String::new(),
                network_ids: BTreeSet::from([format!("net{evi}")]),
                pe_ids: BTreeSet::from(["pe1".to_string()]),
                rd,
                rt,
                mpls_label: MplsLabel::new(100_000).unwrap(),
                vni,
                rp_id: None,
                state: EviState::Deployed,
            },
            applied_rp_id: None,
            failure: None,
            received_at: Instant::now(),
            timing: EviTiming::default(),
        }
    }

    fn label() -> MplsLabel {
        MplsLabel::new(100).unwrap()
    }

    #[test]
    fn local_wins_over_remote() {
        let mut t = Tables::default();
        t.insert_evi(entry(1, 5000));
        let mac = MacAddr::from_u64(1);
        let now = Instant::now();
        assert!(t.insert_local(mac, None, 1, label(), now));
        assert!(!t.insert_local(mac, None, 1, label(), now));
        let r = t.upsert_remote(mac, None, 1, label(), EthernetSegmentId::ZERO, "pe2", now);
        assert_eq!(r, RemoteUpsert::LocalWins);
        assert_eq!(t.lookup_mac(mac, 1).unwrap().origin, Origin::Local);
    }

    #[test]
    fn path_list_sorted_and_row_removed_with_last_path() {
        let mut t = Tables::default();
        t.insert_evi(entry(1, 5000));
        let mac = MacAddr::from_u64(7);
        let now = Instant::now();
        for p in ["peC", "peA", "peB", "peA"] {
            t.upsert_remote(mac, None, 1, label(), EthernetSegmentId::ZERO, p, now);
        }
        assert_eq!(t.lookup_mac(mac, 1).unwrap().path_list, ["peA", "peB", "peC"]);
        for p in ["peA", "peB", "peC"] {
            assert!(t.remove_remote_path(mac, 1, p));
        }
        assert!(t.lookup_mac(mac, 1).is_none());
    }

    #[test]
    fn arp_index_follows_rows() {
        let mut t = Tables::default();
        t.insert_evi(entry(1, 5000));
        t.insert_evi(entry(2, 5001));
        let ip: IpAddr = "10.0.0.5".parse().unwrap();
        let (m1, m2) = (MacAddr::from_u64(1), MacAddr::from_u64(2));
        let now = Instant::now();
        t.upsert_remote(m1, Some(ip), 1, label(), EthernetSegmentId::ZERO, "pe2", now);
        t.upsert_remote(m2, Some(ip), 2, label(), EthernetSegmentId::ZERO, "pe2", now);
        assert_eq!(t.arp_lookup(1, ip), Some(m1));
        assert_eq!(t.arp_lookup(2, ip), Some(m2));
        t.remove_remote_path(m1, 1, "pe2");
        assert_eq!(t.arp_lookup(1, ip), None);
        assert_eq!(t.arp_lookup(2, ip), Some(m2));
    }

    #[test]
    fn imet_participants() {
        let mut t = Tables::default();
        t.insert_evi(entry(1, 5000));
        let k = |n: u32| EvpnRoute::InclusiveMulticast {
            rd: crate::model::RouteDistinguisher::new(1, n),
            eth_tag: 5000,
            originating_ip: "10.0.0.1".parse().unwrap(),
        };
        t.imet_add(1, "peB", k(1));
        t.imet_add(1, "peB", k(2));
        t.imet_remove(1, "peB", &k(1));
        assert_eq!(t.participating_pes(5000), BTreeSet::from(["peB".to_string()]));
        t.imet_remove(1, "peB", &k(2));
        assert!(t.participating_pes(5000).is_empty());
    }

    #[test]
    fn remove_evi_clears_rows() {
        let mut t = Tables::default();
        t.insert_evi(entry(1, 5000));
        t.insert_evi(entry(2, 5001));
        let now = Instant::now();
        t.insert_local(MacAddr::from_u64(1), None, 1, label(), now);
        t.insert_local(MacAddr::from_u64(1), None, 2, label(), now);
        t.remove_evi(1);
        assert_eq!(t.mac_entries().count(), 1);
        assert!(t.evi_of_network("net1").is_none());
        assert!(t.aux_mapping(5000).is_none());
    }
}
