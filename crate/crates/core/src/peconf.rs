// SPDX-License-Identifier: Apache-2.0

//! Device configuration rendering and multi-PE configuration transactions.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{Mutex, OwnedMutexGuard};
use tracing::warn;

use crate::model::{EviRecord, MplsLabel, PeId, RoutingPolicy};
use crate::netconf::{Datastore, Element, NetconfClient, NetconfError};

pub const DEVICE_NS: &str = "urn:example:evpn-device";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown PE {0}")]
    UnknownPe(PeId),
    #[error(transparent)]
    Netconf(#[from] NetconfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DocOperation {
    Merge,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigDocument {
    pub pe_id: PeId,
    pub xml_body: String,
    pub operation: DocOperation,
}

impl ConfigDocument {
    fn new(pe_id: &str, root: Element, operation: DocOperation) -> Self {
        Self { pe_id: pe_id.to_string(), xml_body: root.to_xml(), operation }
    }

    pub fn element(&self) -> Element {
        Element::parse(&self.xml_body).expect("rendered documents are well-formed")
    }
}

fn config_root(child: Element) -> Element {
    Element::new("config").attr("xmlns", DEVICE_NS).child(child)
}

fn evpn_element(evi: &EviRecord) -> Result<Element, ConfigError> {
    if evi.rd.assigned_number != evi.evi_id || evi.rt.local_admin != evi.evi_id {
        return Err(ConfigError::InvalidState(format!(
            "EVI {} has no RD/RT allocated",
            evi.evi_id
        )));
    }
    if evi.mpls_label.value() < MplsLabel::FIRST_UNRESERVED {
        return Err(ConfigError::InvalidState(format!("EVI {} has no label allocated", evi.evi_id)));
    }
    Ok(Element::new("evpn")
        .child(Element::leaf("evi", evi.evi_id))
        .child(Element::leaf("rd", evi.rd))
        .child(Element::leaf("customer-id", &evi.customer_id))
        .child(Element::leaf("sap-id", &evi.sap_id))
        .child(Element::leaf("vni", evi.vni))
        .child(
            Element::new("route-target")
                .child(Element::leaf("import", evi.rt))
                .child(Element::leaf("export", evi.rt)),
        )
        .child(Element::leaf("mpls-label", evi.mpls_label.value())))
}

/// Per-EVI document for one PE. Output is a pure function of the inputs.
pub fn render_evi_config(
    evi: &EviRecord,
    rp: Option<&RoutingPolicy>,
    pe_id: &str,
) -> Result<ConfigDocument, ConfigError> {
    let mut evpn = evpn_element(evi)?;
    if let Some(rp) = rp {
        let mut policy = Element::new("policy")
            .child(Element::leaf("advertise-mac", rp.allow_mac_advertisement));
        for rt in &rp.import_rts {
            policy = policy.child(Element::leaf("import-rt", rt));
        }
        for rt in &rp.export_rts {
            policy = policy.child(Element::leaf("export-rt", rt));
        }
        if let Some(max) = rp.max_mac_routes {
            policy = policy.child(Element::leaf("max-mac-routes", max));
        }
        evpn = evpn.child(policy);
    }
    let root = config_root(Element::new("evpn-instances").child(evpn));
    Ok(ConfigDocument::new(pe_id, root, DocOperation::Merge))
}

/// Removal document: the EVI subtree tagged `operation="delete"`.
pub fn render_evi_delete(evi: &EviRecord, pe_id: &str) -> Result<ConfigDocument, ConfigError> {
    let evpn = evpn_element(evi)?.attr("operation", "delete");
    let root = config_root(Element::new("evpn-instances").child(evpn));
    Ok(ConfigDocument::new(pe_id, root, DocOperation::Delete))
}

/// Base BGP document: EVPN family plus one `<neighbor>` per address, in order.
pub fn render_base_config(pe_id: &str, neighbors: &[IpAddr]) -> Result<ConfigDocument, ConfigError> {
    if neighbors.is_empty() {
        return Err(ConfigError::InvalidArgument("base config needs at least one neighbor".into()));
    }
    let mut bgp = Element::new("bgp").child(Element::new("family").child(Element::new("evpn")));
    for n in neighbors {
        bgp = bgp.child(Element::new("neighbor").child(Element::leaf("address", n)));
    }
    Ok(ConfigDocument::new(pe_id, config_root(bgp), DocOperation::Merge))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnPhase {
    Rendering,
    Validating,
    Committing,
    Committed,
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum PeTxnStatus {
    Committed,
    Discarded,
    Failed(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct TxnReport {
    pub txn_id: u64,
    pub phase: TxnPhase,
    pub reason: Option<String>,
    pub pe_status: BTreeMap<PeId, PeTxnStatus>,
    pub edit: Duration,
    pub validate: Duration,
    pub commit: Duration,
    pub total: Duration,
}

impl TxnReport {
    pub fn committed(&self) -> bool {
        self.phase == TxnPhase::Committed
    }

    /// PEs that committed inside a transaction that was rolled back.
    pub fn inconsistent_pes(&self) -> Vec<&PeId> {
        if self.committed() {
            return Vec::new();
        }
        self.pe_status
            .iter()
            .filter(|(_, s)| **s == PeTxnStatus::Committed)
            .map(|(p, _)| p)
            .collect()
    }
}

type Slot = Arc<Mutex<Option<NetconfClient>>>;

/// Pushes configuration to PEs over long-lived pooled sessions, one per PE.
#[derive(Debug)]
pub struct PeConfigurator {
    endpoints: HashMap<PeId, SocketAddr>,
    sessions: HashMap<PeId, Slot>,
    rpc_timeout: Duration,
    next_txn: AtomicU64,
}

struct Held {
    pe: PeId,
    doc: Element,
    guard: OwnedMutexGuard<Option<NetconfClient>>,
    status: Option<PeTxnStatus>,
}

impl Held {
    fn client(&mut self) -> &mut NetconfClient {
        self.guard.as_mut().expect("session established before use")
    }

    fn fail(&mut self, e: &NetconfError) {
        if matches!(e, NetconfError::Rpc { .. }) {
            self.status = Some(PeTxnStatus::Failed(e.to_string()));
        } else {
            // Transport trouble: drop the session so the next use reconnects.
            *self.guard = None;
            self.status = Some(PeTxnStatus::Failed(format!("transport: {e}")));
        }
    }
}

impl PeConfigurator {
    pub fn new(endpoints: impl IntoIterator<Item = (PeId, SocketAddr)>, rpc_timeout: Duration) -> Self {
        let endpoints: HashMap<_, _> = endpoints.into_iter().collect();
        let sessions = endpoints.keys().map(|p| (p.clone(), Slot::default())).collect();
        Self { endpoints, sessions, rpc_timeout, next_txn: AtomicU64::new(1) }
    }

    pub fn pe_ids(&self) -> impl Iterator<Item = &PeId> {
        self.endpoints.keys()
    }

    async fn ensure(&self, pe: &str, slot: &mut Option<NetconfClient>) -> Result<(), NetconfError> {
        if slot.is_none() {
            *slot = Some(NetconfClient::connect(self.endpoints[pe], self.rpc_timeout).await?);
        }
        Ok(())
    }

    pub async fn get_config(&self, pe: &str, ds: Datastore) -> Result<Element, ConfigError> {
        let slot = self.sessions.get(pe).ok_or_else(|| ConfigError::UnknownPe(pe.into()))?;
        let mut guard = slot.lock().await;
        self.ensure(pe, &mut guard).await?;
        let r = guard.as_mut().unwrap().get_config(ds).await;
        if r.is_err() {
            *guard = None;
        }
        Ok(r?)
    }

    /// Edit every PE's candidate, validate all, then commit all; any edit or
    /// validation failure discards the candidate on every PE.
    pub async fn push_transaction(&self, docs: Vec<ConfigDocument>) -> Result<TxnReport, ConfigError> {
        let txn_id = self.next_txn.fetch_add(1, Ordering::Relaxed);
        let mut by_pe = BTreeMap::new();
        for d in docs {
            if !self.sessions.contains_key(&d.pe_id) {
                return Err(ConfigError::UnknownPe(d.pe_id));
            }
            let el = Element::parse(&d.xml_body).map_err(NetconfError::from)?;
            if by_pe.insert(d.pe_id.clone(), el).is_some() {
                return Err(ConfigError::InvalidArgument(format!("two documents for {}", d.pe_id)));
            }
        }
        if by_pe.is_empty() {
            return Err(ConfigError::InvalidArgument("transaction without documents".into()));
        }

        // Lock in PE order so overlapping transactions cannot deadlock and
        // queue per PE in submission order.
        let mut held = Vec::with_capacity(by_pe.len());
        for (pe, doc) in by_pe {
            let guard = self.sessions[&pe].clone().lock_owned().await;
            held.push(Held { pe, doc, guard, status: None });
        }
        let mut connect_err = None;
        for h in &mut held {
            if let Err(e) = self.ensure(&h.pe, &mut h.guard).await {
                h.fail(&e);
                connect_err.get_or_insert_with(|| format!("{}: {e}", h.pe));
            }
        }

        let started = Instant::now();
        let mut report = TxnReport {
            txn_id,
            phase: TxnPhase::Rendering,
            reason: None,
            pe_status: BTreeMap::new(),
            edit: Duration::ZERO,
            validate: Duration::ZERO,
            commit: Duration::ZERO,
            total: Duration::ZERO,
        };

        let mut failure = connect_err;
        if failure.is_none() {
            let t = Instant::now();
            failure = run_phase(&mut held, |h| {
                let doc = h.doc.clone();
                Box::pin(async move { h.client().edit_config(doc).await })
            })
            .await;
            report.edit = t.elapsed();
        }
        if failure.is_none() {
            report.phase = TxnPhase::Validating;
            let t = Instant::now();
            failure = run_phase(&mut held, |h| Box::pin(async move { h.client().validate().await })).await;
            report.validate = t.elapsed();
        }
        if failure.is_none() {
            report.phase = TxnPhase::Committing;
            let t = Instant::now();
            failure = run_phase(&mut held, |h| Box::pin(async move { h.client().commit().await })).await;
            report.commit = t.elapsed();
            for h in held.iter_mut().filter(|h| h.status.is_none()) {
                h.status = Some(PeTxnStatus::Committed);
            }
        }

        match failure {
            None => report.phase = TxnPhase::Committed,
            Some(reason) => {
                let discards = held
                    .iter_mut()
                    .filter(|h| h.guard.is_some() && h.status != Some(PeTxnStatus::Committed))
                    .map(|h| async move {
                        if let Err(e) = h.client().discard_changes().await {
                            warn!(pe = %h.pe, "discard-changes failed: {e}");
                            *h.guard = None;
                        }
                        if h.status.is_none() {
                            h.status = Some(PeTxnStatus::Discarded);
                        }
                    });
                join_all(discards).await;
                for h in held.iter_mut().filter(|h| h.status.is_none()) {
                    h.status = Some(PeTxnStatus::Discarded);
                }
                report.phase = TxnPhase::RolledBack;
                report.reason = Some(reason);
            }
        }
        report.pe_status = held.into_iter().map(|h| (h.pe, h.status.unwrap())).collect();
        report.total = started.elapsed();
        Ok(report)
    }
}

type PhaseFut<'a> = std::pin::Pin<Box<dyn std::future::Future<Output = Result<(), NetconfError>> + Send + 'a>>;

/// Runs one RPC on every PE concurrently; returns the first failure.
async fn run_phase<F>(held: &mut [Held], op: F) -> Option<String>
where
    F: for<'a> Fn(&'a mut Held) -> PhaseFut<'a>,
{
    let results = join_all(held.iter_mut().map(|h| async {
        let r = op(h).await;
        (h, r)
    }))
    .await;
    let mut failure = None;
    for (h, r) in results {
        if let Err(e) = r {
            h.fail(&e);
            failure.get_or_insert_with(|| format!("{}: {e}", h.pe));
        }
    }
    failure
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_rd_rt, EviState};
    use std::collections::BTreeSet;

    fn evi(id: u32) -> EviRecord {
        let (rd, rt) = derive_rd_rt(u64::from(id), 64512).unwrap();
        EviRecord {
            evi_id: id,
            customer_id: "c1".into(),
            virtual_network_id: "vn1".into(),
            sap_id: "sap-1".into(),
            network_ids: BTreeSet::from(["net1".to_string()]),
            pe_ids: BTreeSet::from(["pe1".to_string()]),
            rd,
            rt,
            mpls_label: MplsLabel::new(100_000).unwrap(),
            vni: 5000,
            rp_id: None,
            state: EviState::Pending,
        }
    }

    #[test]
    fn evi_document_layout() {
        let doc = render_evi_config(&evi(100), None, "pe1").unwrap();
        assert!(doc.xml_body.starts_with("<config xmlns=\"urn:example:evpn-device\"><evpn-instances>"));
        assert!(doc.xml_body.contains("<evpn><evi>100</evi><rd>64512:100</rd>"));
        assert!(doc.xml_body.contains("<import>64512:100</import><export>64512:100</export>"));
        assert!(doc.xml_body.contains("<mpls-label>100000</mpls-label>"));
        assert!(!doc.xml_body.contains("<policy>"));
        assert_eq!(doc, render_evi_config(&evi(100), None, "pe1").unwrap());
    }

    #[test]
    fn policy_section() {
        let rp = RoutingPolicy {
            rp_id: 1,
            name: "p".into(),
            allow_mac_advertisement: false,
            import_rts: BTreeSet::new(),
            export_rts: BTreeSet::new(),
            max_mac_routes: None,
        };
        let doc = render_evi_config(&evi(100), Some(&rp), "pe1").unwrap();
        assert!(doc.xml_body.contains("<policy><advertise-mac>false</advertise-mac></policy>"));
    }

    #[test]
    fn unallocated_evi_is_invalid_state() {
        let mut e = evi(3);
        e.mpls_label = MplsLabel::new(0).unwrap();
        assert!(matches!(render_evi_config(&e, None, "pe1"), Err(ConfigError::InvalidState(_))));
    }

    #[test]
    fn delete_marks_evpn() {
        let doc = render_evi_delete(&evi(7), "pe1").unwrap();
        assert_eq!(doc.operation, DocOperation::Delete);
        assert!(doc.xml_body.contains("<evpn operation=\"delete\"><evi>7</evi>"));
    }

    #[test]
    fn base_config() {
        let one = render_base_config("pe1", &["192.0.2.1".parse().unwrap()]).unwrap();
        assert!(one.xml_body.contains("<family><evpn/></family>"));
        assert_eq!(one.xml_body.matches("<neighbor>").count(), 1);
        let two: Vec<IpAddr> = vec!["192.0.2.2".parse().unwrap(), "192.0.2.1".parse().unwrap()];
        let doc = render_base_config("pe1", &two).unwrap();
        let el = doc.element();
        let addrs: Vec<_> = el.find("bgp").unwrap().find_all("neighbor").map(|n| n.find_text("address").unwrap().to_string()).collect();
        assert_eq!(addrs, ["192.0.2.2", "192.0.2.1"]);
        assert!(matches!(render_base_config("pe1", &[]), Err(ConfigError::InvalidArgument(_))));
    }
}
