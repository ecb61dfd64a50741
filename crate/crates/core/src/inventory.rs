// SPDX-License-Identifier: Apache-2.0

//! Static inventory of PEs, networks and ports loaded at controller start.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MacAddr, PeId};

#[derive(Debug, Error)]
pub enum InventoryError {
    #[error("reading inventory: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing inventory: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid inventory: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeInfo {
    pub id: PeId,
    pub mgmt_addr: SocketAddr,
    pub bgp_addr: SocketAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkInfo {
    pub id: String,
    pub vni: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortInfo {
    pub mac: MacAddr,
    #[serde(default)]
    pub ip: Option<IpAddr>,
    pub network_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    #[serde(default)]
    pub pes: Vec<PeInfo>,
    #[serde(default)]
    pub networks: Vec<NetworkInfo>,
    #[serde(default)]
    pub ports: Vec<PortInfo>,
}

impl Inventory {
    pub fn load(path: &Path) -> Result<Self, InventoryError> {
        let inv: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        inv.check()?;
        Ok(inv)
    }

    pub fn check(&self) -> Result<(), InventoryError> {
        let mut pes = HashMap::new();
        for p in &self.pes {
            if pes.insert(p.id.as_str(), ()).is_some() {
                return Err(InventoryError::Invalid(format!("duplicate PE {}", p.id)));
            }
        }
        let mut vnis = HashMap::new();
        for n in &self.networks {
            if n.vni == 0 || n.vni >= 1 << 24 {
                return Err(InventoryError::Invalid(format!("network {}: VNI {} not 24-bit", n.id, n.vni)));
            }
            if let Some(other) = vnis.insert(n.vni, n.id.as_str()) {
                return Err(InventoryError::Invalid(format!("VNI {} used by {other} and {}", n.vni, n.id)));
            }
        }
        for p in &self.ports {
            if self.network(&p.network_id).is_none() {
                return Err(InventoryError::Invalid(format!("port {} on unknown network {}", p.mac, p.network_id)));
            }
        }
        Ok(())
    }

    pub fn pe(&self, id: &str) -> Option<&PeInfo> {
        self.pes.iter().find(|p| p.id == id)
    }

    pub fn network(&self, id: &str) -> Option<&NetworkInfo> {
        self.networks.iter().find(|n| n.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_format() {
        let inv: Inventory = serde_json::from_str(
            r#"{"pes":[{"id":"pe1","mgmt_addr":"127.0.0.1:2830","bgp_addr":"127.0.0.1:1790"}],
                "networks":[{"id":"net1","vni":5000}],
                "ports":[{"mac":"02:00:00:00:00:01","ip":"10.0.0.5","network_id":"net1"}]}"#,
        )
        .unwrap();
        inv.check().unwrap();
        assert_eq!(inv.network("net1").unwrap().vni, 5000);
        assert_eq!(inv.ports[0].mac, MacAddr::from_u64(0x0200_0000_0001));
    }

    #[test]
    fn rejects_shared_vni() {
        let inv = Inventory {
            networks: vec![
                NetworkInfo { id: "a".into(), vni: 7 },
                NetworkInfo { id: "b".into(), vni: 7 },
            ],
            ..Inventory::default()
        };
        assert!(inv.check().is_err());
    }
}
