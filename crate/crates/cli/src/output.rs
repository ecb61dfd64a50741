// SPDX-License-Identifier: Apache-2.0

use serde_json::Value;

use crate::Format;

pub fn json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_else(|_| v.to_string()));
}

fn text(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Prints rows as space-aligned columns.
pub fn table(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", padded.join("  ").trim_end());
    };
    line(header.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
}

pub fn created(fmt: Format, label: &str, v: &Value) {
    match fmt {
        Format::Json => json(v),
        Format::Table => println!("{label} {}", text(&v["id"])),
    }
}

pub fn ack(fmt: Format, v: &Value, message: &str) {
    match fmt {
        Format::Json => json(v),
        Format::Table => println!("{message}"),
    }
}

pub fn object(fmt: Format, v: &Value) {
    match (fmt, v) {
        (Format::Table, Value::Object(map)) => {
            let rows: Vec<Vec<String>> = map
                .iter()
                .map(|(k, v)| {
                    let cell = match v {
                        Value::Object(_) => v.to_string(),
                        Value::Array(a) if a.iter().any(Value::is_object) => v.to_string(),
                        _ => text(v),
                    };
                    vec![k.clone(), cell]
                })
                .collect();
            table(&["FIELD", "VALUE"], &rows);
        }
        _ => json(v),
    }
}

pub fn l2vpn_list(fmt: Format, v: &Value) {
    let Format::Table = fmt else { return json(v) };
    let rows: Vec<Vec<String>> = v
        .as_array()
        .into_iter()
        .flatten()
        .map(|e| {
            ["evi_id", "state", "customer_id", "vni", "rd", "rt", "network_ids", "pe_ids", "rp_id"]
                .iter()
                .map(|k| text(&e[*k]))
                .collect()
        })
        .collect();
    table(&["EVI", "STATE", "CUSTOMER", "VNI", "RD", "RT", "NETWORKS", "PES", "RP"], &rows);
}

pub fn rp_list(fmt: Format, v: &Value) {
    let Format::Table = fmt else { return json(v) };
    let rows: Vec<Vec<String>> = v
        .as_array()
        .into_iter()
        .flatten()
        .map(|e| {
            ["rp_id", "name", "allow_mac_advertisement", "import_rts", "export_rts", "evi_ids"]
                .iter()
                .map(|k| text(&e[*k]))
                .collect()
        })
        .collect();
    table(&["RP", "NAME", "ALLOW_MAC", "IMPORT", "EXPORT", "EVIS"], &rows);
}

pub fn arp(fmt: Format, v: &Value) {
    match fmt {
        Format::Json => json(v),
        Format::Table => match &v["mac"] {
            Value::String(mac) => println!("{} is-at {mac} (evi {})", text(&v["ip"]), text(&v["evi_id"])),
            _ => println!("{} unknown (evi {})", text(&v["ip"]), text(&v["evi_id"])),
        },
    }
}
