// SPDX-License-Identifier: Apache-2.0

//! Candidate/running configuration datastores of a simulated PE.

use std::collections::{BTreeSet, HashSet};

use crate::model::MplsLabel;
use crate::netconf::Element;
use crate::peconf::DEVICE_NS;

const ROOT_CHILDREN: &[&str] = &["bgp", "evpn-instances"];
const BGP_CHILDREN: &[&str] = &["family", "neighbor"];
const EVPN_CHILDREN: &[&str] =
    &["evi", "rd", "customer-id", "sap-id", "vni", "route-target", "mpls-label", "policy"];
const RT_CHILDREN: &[&str] = &["import", "export"];
const POLICY_CHILDREN: &[&str] = &["advertise-mac", "import-rt", "export-rt", "max-mac-routes"];

fn empty_root() -> Element {
    Element::new("config").attr("xmlns", DEVICE_NS)
}

fn evi_of(evpn: &Element) -> Option<&str> {
    evpn.find_text("evi").map(str::trim)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datastore {
    candidate: Element,
    running: Element,
}

impl Default for Datastore {
    fn default() -> Self {
        Self { candidate: empty_root(), running: empty_root() }
    }
}

impl Datastore {
    pub fn candidate(&self) -> &Element {
        &self.candidate
    }

    pub fn running(&self) -> &Element {
        &self.running
    }

    /// Merges a `<config>` subtree into the candidate.
    ///
    /// `<bgp>` replaces the existing base section. Each `<evpn>` replaces the
    /// candidate entry with the same `<evi>`, or is removed when tagged
    /// `operation="delete"`. Entries repeated inside one edit are all kept so
    /// that validation can reject them.
    pub fn edit(&mut self, config: &Element) {
        for section in &config.children {
            match section.local_name() {
                "bgp" => {
                    self.candidate.children.retain(|c| c.local_name() != "bgp");
                    self.candidate.children.push(section.clone());
                }
                "evpn-instances" => self.edit_instances(section),
                _ => self.candidate.children.push(section.clone()),
            }
        }
    }

    fn edit_instances(&mut self, section: &Element) {
        if self.candidate.find("evpn-instances").is_none() {
            self.candidate.children.push(Element::new("evpn-instances"));
        }
        let list = self.candidate.find_mut("evpn-instances").unwrap();
        let before: HashSet<String> =
            list.children.iter().filter_map(evi_of).map(str::to_string).collect();
        for entry in &section.children {
            let id = evi_of(entry).map(str::to_string);
            let existing = id.as_ref().filter(|id| before.contains(*id));
            if entry.get_attr("operation") == Some("delete") {
                if let Some(id) = &id {
                    list.children.retain(|c| evi_of(c) != Some(id.as_str()));
                }
                continue;
            }
            let mut entry = entry.clone();
            entry.attrs.retain(|(k, _)| k != "operation");
            match existing {
                Some(id) => {
                    let pos = list.children.iter().position(|c| evi_of(c) == Some(id.as_str()));
                    match pos {
                        Some(p) => list.children[p] = entry,
                        None => list.children.push(entry),
                    }
                }
                None => list.children.push(entry),
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        validate_tree(&self.candidate)
    }

    /// Validates the candidate and copies it into running.
    pub fn commit(&mut self) -> Result<(), String> {
        self.validate()?;
        self.running = self.candidate.clone();
        Ok(())
    }

    pub fn discard(&mut self) {
        self.candidate = self.running.clone();
    }
}

fn check_children(el: &Element, allowed: &[&str]) -> Result<(), String> {
    match el.children.iter().find(|c| !allowed.contains(&c.local_name())) {
        Some(c) => Err(format!("unexpected <{}> in <{}>", c.name, el.name)),
        None => Ok(()),
    }
}

pub fn validate_tree(root: &Element) -> Result<(), String> {
    check_children(root, ROOT_CHILDREN)?;
    if let Some(bgp) = root.find("bgp") {
        check_children(bgp, BGP_CHILDREN)?;
        for f in bgp.find_all("family") {
            check_children(f, &["evpn"])?;
        }
        for n in bgp.find_all("neighbor") {
            check_children(n, &["address"])?;
            n.find_text("address")
                .and_then(|a| a.trim().parse::<std::net::IpAddr>().ok())
                .ok_or("neighbor without a valid <address>")?;
        }
    }
    let mut seen = BTreeSet::new();
    for list in root.find_all("evpn-instances") {
        check_children(list, &["evpn"])?;
        for evpn in &list.children {
            check_children(evpn, EVPN_CHILDREN)?;
            let id: u32 = evi_of(evpn)
                .and_then(|t| t.parse().ok())
                .filter(|id| *id > 0)
                .ok_or("<evpn> without a valid <evi>")?;
            if !seen.insert(id) {
                return Err(format!("duplicate evi {id}"));
            }
            let label: u32 = evpn
                .find_text("mpls-label")
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| format!("evi {id}: missing <mpls-label>"))?;
            if !(MplsLabel::FIRST_UNRESERVED..=MplsLabel::MAX).contains(&label) {
                return Err(format!("evi {id}: label {label} outside [16, 2^20)"));
            }
            if let Some(rt) = evpn.find("route-target") {
                check_children(rt, RT_CHILDREN)?;
            }
            if let Some(p) = evpn.find("policy") {
                check_children(p, POLICY_CHILDREN)?;
            }
        }
    }
    Ok(())
}

/// EVI ids present in a configuration tree.
pub fn evi_ids(root: &Element) -> BTreeSet<u32> {
    root.find_all("evpn-instances")
        .flat_map(|l| l.find_all("evpn"))
        .filter_map(|e| evi_of(e)?.parse().ok())
        .collect()
}
