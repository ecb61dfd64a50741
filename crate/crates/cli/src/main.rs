// SPDX-License-Identifier: Apache-2.0

//! `evpnctl`: operator client for the EVPN controller.

mod bench;
mod output;

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evpn_core::api::{AssociationRequest, L2vpnRequest, RpRequest};
use evpn_core::client::{ApiClient, ClientError};
use evpn_core::controller::{Controller, ControllerConfig};
use evpn_core::inventory::Inventory;
use evpn_core::sim::{PeSimulator, SimConfig, SimLatencyProfile};
use reqwest::Method;
use serde_json::{json, Value};

const DEFAULT_ADDR: &str = "127.0.0.1:8181";

#[derive(Debug, Parser)]
#[command(name = "evpnctl", version, about = "EVPN controller client")]
struct Cli {
    /// Controller address (host:port).
    #[arg(long, global = true, env = "EVPN_CTL_ADDR", default_value = DEFAULT_ADDR)]
    addr: String,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Manage L2VPN instances.
    #[command(subcommand)]
    L2vpn(L2vpnCmd),
    /// Manage routing policies.
    #[command(subcommand)]
    Rp(RpCmd),
    /// Attach a routing policy to an L2VPN.
    Associate {
        #[arg(long)]
        evi: u32,
        #[arg(long)]
        rp: u32,
    },
    #[command(subcommand)]
    Arp(ArpCmd),
    /// Controller and session counters.
    Stats,
    #[command(subcommand)]
    Bench(bench::BenchCmd),
    /// Run a controller.
    Serve(ServeArgs),
    /// Run a simulated PE.
    Sim(SimArgs),
}

#[derive(Debug, Subcommand)]
enum L2vpnCmd {
    Create {
        #[arg(long)]
        customer: String,
        #[arg(long)]
        vnid: String,
        #[arg(long)]
        sap: String,
        #[arg(long, value_delimiter = ',', required = true)]
        networks: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        pes: Vec<String>,
    },
    Delete {
        id: u32,
    },
    List,
    Show {
        id: u32,
    },
}

#[derive(Debug, Subcommand)]
enum RpCmd {
    Create {
        #[arg(long)]
        name: String,
        /// Advertise MAC routes for attached EVIs.
        #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
        allow_mac: bool,
        #[arg(long, value_delimiter = ',')]
        import_rts: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        export_rts: Vec<String>,
        #[arg(long)]
        max_mac_routes: Option<u32>,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum ArpCmd {
    /// Resolve an IP inside an EVI from the controller's tables.
    Query {
        #[arg(long)]
        evi: u32,
        #[arg(long)]
        ip: IpAddr,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Inventory JSON (PEs, networks, ports).
    #[arg(long)]
    inventory: PathBuf,
    #[arg(long, default_value = DEFAULT_ADDR)]
    http: SocketAddr,
    /// Also accept inbound BGP sessions on this address.
    #[arg(long)]
    bgp_listen: Option<SocketAddr>,
    #[arg(long, default_value_t = 64512)]
    asn: u16,
    #[arg(long, default_value = "10.0.0.1")]
    router_id: Ipv4Addr,
    /// Send learned routes back to the peer that advertised them.
    #[arg(long)]
    reflect: bool,
    #[arg(long)]
    instrumentation: bool,
    #[arg(long)]
    no_base_config: bool,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long, default_value = "pe1")]
    id: String,
    #[arg(long, default_value_t = 65001)]
    asn: u16,
    #[arg(long, default_value = "10.255.0.1")]
    router_id: Ipv4Addr,
    #[arg(long, default_value = "127.0.0.1")]
    listen: IpAddr,
    #[arg(long, default_value_t = 8300)]
    netconf_port: u16,
    #[arg(long, default_value_t = 1790)]
    bgp_port: u16,
    #[arg(long, default_value_t = 8400)]
    control_port: u16,
    #[arg(long)]
    latency_profile: Option<PathBuf>,
    #[arg(long)]
    reflect: bool,
}

#[derive(Debug)]
pub enum CliError {
    Api(ClientError),
    Other(String),
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Api(e)
    }
}

pub fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Api(ClientError::Api { status, body })) => {
            eprintln!("error: HTTP {status}");
            println!("{}", serde_json::to_string_pretty(&body).unwrap_or_default());
            ExitCode::FAILURE
        }
        Err(CliError::Api(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let api = ApiClient::new(&cli.addr);
    let fmt = cli.format;
    let none = None::<&()>;
    match cli.command {
        Command::L2vpn(L2vpnCmd::Create { customer, vnid, sap, networks, pes }) => {
            let req = L2vpnRequest {
                customer_id: customer,
                virtual_network_id: vnid,
                sap_id: sap,
                network_ids: networks,
                pe_ids: pes,
            };
            let v = api.raw(Method::POST, "/v1/l2vpn", Some(&req)).await?;
            output::created(fmt, "evi_id", &v);
        }
        Command::L2vpn(L2vpnCmd::Delete { id }) => {
            let v = api.raw(Method::DELETE, &format!("/v1/l2vpn/{id}"), none).await?;
            output::ack(fmt, &v, &format!("deleted l2vpn {id}"));
        }
        Command::L2vpn(L2vpnCmd::List) => {
            let v = api.raw(Method::GET, "/v1/l2vpn", none).await?;
            output::l2vpn_list(fmt, &v);
        }
        Command::L2vpn(L2vpnCmd::Show { id }) => {
            let v = api.raw(Method::GET, &format!("/v1/l2vpn/{id}"), none).await?;
            output::object(fmt, &v);
        }
        Command::Rp(RpCmd::Create { name, allow_mac, import_rts, export_rts, max_mac_routes }) => {
            let req = RpRequest { name, allow_mac_advertisement: allow_mac, import_rts, export_rts, max_mac_routes };
            let v = api.raw(Method::POST, "/v1/rp", Some(&req)).await?;
            output::created(fmt, "rp_id", &v);
        }
        Command::Rp(RpCmd::List) => {
            let v = api.raw(Method::GET, "/v1/rp", none).await?;
            output::rp_list(fmt, &v);
        }
        Command::Associate { evi, rp } => {
            let body = AssociationRequest { evi_id: Some(evi), rp_id: rp };
            let v = api.raw(Method::PUT, &format!("/v1/l2vpn/{evi}/rp"), Some(&body)).await?;
            output::ack(fmt, &v, &format!("associated rp {rp} with l2vpn {evi}"));
        }
        Command::Arp(ArpCmd::Query { evi, ip }) => {
            let v = api.raw(Method::GET, &format!("/v1/arp?evi={evi}&ip={ip}"), none).await?;
            output::arp(fmt, &v);
        }
        Command::Stats => {
            let v = api.raw(Method::GET, "/v1/stats", none).await?;
            output::object(fmt, &v);
        }
        Command::Bench(cmd) => bench::run(cmd, fmt).await?,
        Command::Serve(args) => serve(args).await?,
        Command::Sim(args) => sim(args).await?,
    }
    Ok(())
}

async fn serve(args: ServeArgs) -> Result<(), CliError> {
    let inventory = Inventory::load(&args.inventory).map_err(other)?;
    let cfg = ControllerConfig {
        asn: args.asn,
        router_id: args.router_id,
        http_addr: args.http,
        bgp_listen: args.bgp_listen,
        reflect: args.reflect,
        instrumentation: args.instrumentation,
        push_base_config: !args.no_base_config,
        ..ControllerConfig::default()
    };
    let mut controller = Controller::start(cfg, inventory).await.map_err(other)?;
    eprintln!("controller listening on http://{}", controller.http_addr());
    if let Some(bgp) = controller.bgp_addr() {
        eprintln!("accepting BGP on {bgp}");
    }
    tokio::signal::ctrl_c().await.map_err(other)?;
    controller.shutdown();
    Ok(())
}

async fn sim(args: SimArgs) -> Result<(), CliError> {
    let latency = match &args.latency_profile {
        Some(p) => SimLatencyProfile::from_file(p).map_err(|e| other(format!("{}: {e}", p.display())))?,
        None => SimLatencyProfile::default(),
    };
    let sim = PeSimulator::start(SimConfig {
        id: args.id,
        asn: args.asn,
        router_id: args.router_id,
        listen_ip: args.listen,
        netconf_port: args.netconf_port,
        bgp_port: args.bgp_port,
        control_port: args.control_port,
        latency,
        reflect: args.reflect,
        ..SimConfig::default()
    })
    .await
    .map_err(other)?;
    let info: Value = json!({
        "id": sim.id(),
        "netconf": sim.netconf_addr().to_string(),
        "bgp": sim.bgp_addr().to_string(),
        "control": sim.control_addr().to_string(),
    });
    println!("{info}");
    tokio::signal::ctrl_c().await.map_err(other)?;
    sim.shutdown();
    Ok(())
}
