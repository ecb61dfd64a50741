// SPDX-License-Identifier: Apache-2.0

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::Subcommand;
use evpn_core::harness::lab::{network_id, pe_id};
use evpn_core::harness::stats::Summary;
use evpn_core::harness::*;
use evpn_core::model::RouteTarget;
use evpn_core::sim::SimLatencyProfile;
use serde_json::json;

use crate::output::{json, table};
use crate::{other, CliError, Format};

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Deploy EVIs one after another against simulated PEs and record
    /// per-stage latencies.
    Deploy {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        delay_s: f64,
        #[arg(long, default_value_t = 2)]
        pes: usize,
        #[arg(long, default_value_t = 2)]
        pes_per_evi: usize,
        /// JSON with edit_ms, validate_ms, commit_ms, jitter_ms.
        #[arg(long)]
        latency_profile: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Send MAC advertisements to a reflecting controller and record
    /// round-trip times.
    Gen {
        /// burst, one or single.
        #[arg(long, default_value = "one")]
        mode: GenMode,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        /// Controller BGP address; an in-process controller is started when
        /// omitted.
        #[arg(long, requires = "rt")]
        peer: Option<SocketAddr>,
        /// Route target the controller imports (asn:number).
        #[arg(long)]
        rt: Option<RouteTarget>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
}

fn summary_row(stage: &str, s: &Summary) -> Vec<String> {
    [s.mean, s.median, s.q1, s.q3, s.min, s.max]
        .iter()
        .map(|v| format!("{v:.3}"))
        .fold(vec![stage.to_string(), s.count.to_string()], |mut row, cell| {
            row.push(cell);
            row
        })
}

const SUMMARY_HEADER: [&str; 8] = ["STAGE", "N", "MEAN_MS", "MEDIAN", "Q1", "Q3", "MIN", "MAX"];

pub async fn run(cmd: BenchCmd, fmt: Format) -> Result<(), CliError> {
    match cmd {
        BenchCmd::Deploy { n, delay_s, pes, pes_per_evi, latency_profile, warmup, seed, out } => {
            if !(delay_s >= 0.0) || pes == 0 {
                return Err(other("--delay-s must be non-negative and --pes positive"));
            }
            let latency = match &latency_profile {
                Some(p) => SimLatencyProfile::from_file(p).map_err(|e| other(format!("{}: {e}", p.display())))?,
                None => SimLatencyProfile::default(),
            };
            let networks = n + warmup;
            let lab = Lab::start(LabConfig { pes, networks, latency, ..LabConfig::default() }).await.map_err(other)?;
            lab.wait_established(Duration::from_secs(30)).await.map_err(other)?;
            let cfg = DeployConfig {
                n,
                inter_request_delay: Duration::from_secs_f64(delay_s),
                pes_per_evi: pes_per_evi.min(pes),
                seed,
                warmup,
                ..DeployConfig::default()
            };
            let net_ids: Vec<String> = (0..networks).map(network_id).collect();
            let pe_ids: Vec<String> = (0..pes).map(pe_id).collect();
            let report = run_deployment_bench(&lab.client(), &net_ids, &pe_ids, &cfg).await.map_err(other)?;
            if !report.rows.is_empty() {
                let files = emit_deploy_report(&out, &report).map_err(other)?;
                eprintln!("wrote {} and {}", files.data.display(), files.summary.display());
            }
            match (fmt, &report.summary) {
                (Format::Json, _) => json(&json!({ "summary": report.summary, "partial": report.partial })),
                (Format::Table, Some(s)) => table(
                    &SUMMARY_HEADER,
                    &[
                        summary_row("l2vpn", &s.l2vpn_ms),
                        summary_row("rp", &s.rp_ms),
                        summary_row("netconf", &s.netconf_ms),
                        summary_row("total", &s.total_ms),
                    ],
                ),
                (Format::Table, None) => {}
            }
            if let Some(why) = report.partial {
                return Err(other(format!("run stopped after {} EVIs: {why}", report.rows.len())));
            }
        }
        BenchCmd::Gen { mode, count, repeat, warmup, peer, rt, out } => {
            let local = match peer {
                Some(_) => None,
                None => Some(GeneratorLab::start(true).await.map_err(other)?),
            };
            let (addr, rt) = match &local {
                Some(g) => (g.bgp_addr, g.route_target),
                None => (peer.expect("peer given"), rt.expect("rt required with peer")),
            };
            let mut reps = Vec::with_capacity(repeat);
            let mut measured = Vec::new();
            for r in 0..repeat.max(1) {
                let cfg = GeneratorConfig {
                    warmup,
                    mac_seed: 0x0a00_0000_0000 + ((r as u64) << 20),
                    ..GeneratorConfig::new(mode, count, addr, rt)
                };
                let run = run_generator(&cfg).await.map_err(other)?;
                measured.extend(cfg.measured_macs());
                reps.push(run.rtts());
            }
            let label = match mode {
                GenMode::Burst => "bbt_q",
                GenMode::OneByOne => "bbt_uq",
                GenMode::Single => "single",
            };
            let (files, summary) = emit_rtt_report(&out, label, &reps).map_err(other)?;
            eprintln!("wrote {}", files.data.display());
            let wbt = match &local {
                Some(g) => {
                    let (_, w) = emit_wbt_report(&out, &collect_wbt(g.lab.controller.tracer(), &measured)).map_err(other)?;
                    Some(w)
                }
                None => None,
            };
            match fmt {
                Format::Json => json(&json!({ "rtt": summary, "wbt": wbt })),
                Format::Table => {
                    table(&SUMMARY_HEADER, &[summary_row(label, &summary.pooled)]);
                    if let Some(w) = wbt {
                        println!(
                            "whitebox: {} records, mean pipeline {:.3} ms, mean bus {:.3} ms",
                            w.records,
                            w.mean_pipeline_ms.unwrap_or(f64::NAN),
                            w.mean_bus_ms.unwrap_or(f64::NAN)
                        );
                    }
                }
            }
        }
    }
    Ok(())
}
