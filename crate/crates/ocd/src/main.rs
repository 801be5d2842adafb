//! `ocd` command line: analytical timing tables, relay planning, the
//! socket relay daemon, and the network-lab experiment runner.

use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ocd::bench::{
    improvement_report, read_cells_csv, rtt_sweep, run_matrix, spearman, write_cells_csv,
    EstimatorKind, MatrixFile,
};
use ocd::model::{
    reference_relay_path, reference_topology, FeatureSet, Topology, TopologyFile,
};
use ocd::netlab::scenario::{run_fairness, run_transfer_traced, ScenarioFile};
use ocd::planner::{plan_baseline, rank_mid_relays, RttTable};
use ocd::relay::config::{RelayConfig, RouteRule};
use ocd::relay::socket::SocketRelay;
use ocd::timing::{timing, Scenario, Strategy};

#[derive(Parser)]
#[command(name = "ocd", version, about = "Split-TCP relay toolkit: timing model, planner, relay daemon, network lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a topology and print analytical timing breakdowns.
    Model(ModelArgs),
    /// Pick relays for a client/server pair from an RTT table.
    Plan(PlanArgs),
    /// Run a relay on real sockets.
    Relay(RelayArgs),
    /// Network lab experiments.
    #[command(subcommand)]
    Lab(LabCmd),
}

#[derive(Args)]
struct ModelArgs {
    /// Topology TOML; the built-in reference layout when omitted.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Relay route, client first, server last. Defaults to the reference route.
    #[arg(long, value_delimiter = ',')]
    path: Vec<String>,
    #[arg(long, default_value = "10000")]
    size: u64,
    /// Feature set for the split strategy: baseline, +TP, +TP+ES, +TP+ES+CP, pied_piper.
    #[arg(long, default_value = "pied_piper")]
    features: String,
}

#[derive(Args)]
struct PlanArgs {
    /// RTT table TOML: `[[rtt]]` entries with a, b, ms.
    #[arg(long)]
    rtt_table: PathBuf,
    #[arg(long)]
    client: String,
    #[arg(long)]
    server: String,
    /// Candidate relay host ids.
    #[arg(long, value_delimiter = ',', required = true)]
    relays: Vec<String>,
}

#[derive(Args)]
struct RelayArgs {
    /// Client-facing listen address.
    #[arg(long)]
    listen: SocketAddr,
    /// Relay-to-relay listen address.
    #[arg(long)]
    peer_listen: SocketAddr,
    /// Peer relays to keep pooled connections to.
    #[arg(long = "peer")]
    peers: Vec<SocketAddr>,
    /// Route rule `<port>=<addr:port>[,via=<addr:port>]`; repeatable.
    #[arg(long = "route")]
    routes: Vec<String>,
    #[arg(long)]
    no_early_syn: bool,
    #[arg(long)]
    no_thread_pool: bool,
    #[arg(long)]
    no_connection_pool: bool,
    #[arg(long)]
    no_turbo_start: bool,
}

#[derive(Subcommand)]
enum LabCmd {
    /// Run a matrix or scenario file; matrix results go to CSV.
    Run(LabRunArgs),
    /// Recompute the improvement report from saved matrix CSV.
    Report(LabReportArgs),
    /// Estimator-vs-measured sweep over random topologies.
    Sweep(LabSweepArgs),
}

#[derive(Args)]
struct LabRunArgs {
    /// Matrix TOML (strategies/sizes/...) or scenario TOML ([transfer]/[fairness]).
    file: PathBuf,
    /// Where to write matrix result CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a per-event trace CSV (transfer scenarios only).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct LabReportArgs {
    csv: PathBuf,
    /// Strategy every other cell is compared against.
    #[arg(long, default_value = "e2e")]
    baseline: String,
}

#[derive(Args)]
struct LabSweepArgs {
    #[arg(long, value_enum, default_value = "nosplit")]
    estimator: SweepEstimator,
    #[arg(long, default_value = "30")]
    topologies: usize,
    #[arg(long, default_value = "1")]
    seed: u64,
}

#[derive(Clone, clap::ValueEnum)]
enum SweepEstimator {
    Nosplit,
    MidRelay,
}

fn load_topology(path: &Option<PathBuf>) -> Result<Topology> {
    match path {
        None => Ok(reference_topology()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: TopologyFile = toml::from_str(&text)?;
            Ok(file.into_topology())
        }
    }
}

fn feature_set(label: &str) -> Result<FeatureSet> {
    FeatureSet::ladder()
        .into_iter()
        .find(|(l, _)| *l == label)
        .map(|(_, f)| f)
        .with_context(|| format!("unknown feature set {label:?}; expected one of baseline, +TP, +TP+ES, +TP+ES+CP, pied_piper"))
}

fn cmd_model(a: ModelArgs) -> Result<()> {
    let topo = load_topology(&a.topology)?;
    let path = if a.path.is_empty() { reference_relay_path() } else { a.path.clone() };
    let features = feature_set(&a.features)?;
    for strategy in [Strategy::Ideal, Strategy::E2e, Strategy::NosplitRelay, Strategy::Split] {
        let mut scen = Scenario::new(topo.clone(), strategy, path.clone(), a.size);
        scen.features = features;
        // e2e rides the direct route, not the relay detour.
        scen.e2e_path = vec![path.first().unwrap().clone(), path.last().unwrap().clone()];
        match timing(&scen) {
            Ok(b) => {
                println!(
                    "{:?} ({} bytes, features {}):",
                    strategy,
                    a.size,
                    features.label()
                );
                print!("{b}");
                println!(
                    "  ttfb {:.3} ms, completion {:.3} ms\n",
                    b.ttfb_ms(),
                    b.completion_ms()
                );
            }
            Err(e) => println!("{strategy:?}: {e}\n"),
        }
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct RttFile {
    rtt: Vec<RttEntry>,
}

#[derive(serde::Deserialize)]
struct RttEntry {
    a: String,
    b: String,
    ms: f64,
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let text = fs::read_to_string(&a.rtt_table)
        .with_context(|| format!("reading {}", a.rtt_table.display()))?;
    let file: RttFile = toml::from_str(&text)?;
    let mut table = RttTable::new();
    for e in &file.rtt {
        table.insert(&e.a, &e.b, e.ms);
    }
    let (rc, rs) = plan_baseline(&a.client, &a.server, &a.relays, &table)?;
    println!("client-side relay: {rc}");
    println!("server-side relay: {rs}");
    let mids: Vec<String> =
        a.relays.iter().filter(|r| **r != rc && **r != rs).cloned().collect();
    if !mids.is_empty() {
        match rank_mid_relays(&rc, &rs, &mids, &table) {
            Ok(ranked) => {
                println!("mid-relay candidates (predicted gain):");
                for (id, gain) in ranked {
                    println!("  {id}: {gain:.3}x");
                }
            }
            Err(e) => println!("mid-relay ranking unavailable: {e}"),
        }
    }
    Ok(())
}

fn cmd_relay(a: RelayArgs) -> Result<()> {
    let mut cfg = RelayConfig::new(a.listen, a.peer_listen);
    cfg.peer_relays = a.peers;
    for r in &a.routes {
        cfg.routes.push(RouteRule::parse(r).map_err(|e| anyhow::anyhow!(e))?);
    }
    cfg.features.early_syn = !a.no_early_syn;
    cfg.features.thread_pool = !a.no_thread_pool;
    cfg.features.connection_pool = !a.no_connection_pool;
    cfg.features.turbo_start = !a.no_turbo_start;
    let relay = SocketRelay::start(cfg)?;
    println!("relay listening on {} (peers on {})", a.listen, a.peer_listen);
    loop {
        std::thread::sleep(std::time::Duration::from_secs(30));
        let status = relay.status();
        for p in &status.pools {
            println!(
                "pool {}: idle {} pending {} claimed {} fallback {}",
                p.peer, p.idle, p.pending, p.claimed, p.fallback_fresh_dials
            );
        }
        println!(
            "connections: {} ({} fresh upstream dials so far)",
            status.conns.len(),
            status.fresh_dials
        );
    }
}

fn write_trace(path: &PathBuf, trace: &[ocd::netlab::sim::TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_ms", "event", "conn", "cwnd", "bytes"])?;
    for row in trace {
        w.write_record([
            format!("{:.6}", row.t_ns as f64 / 1e6),
            row.event.to_string(),
            row.conn.map(|c| c.to_string()).unwrap_or_default(),
            format!("{:.2}", row.cwnd),
            row.bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_lab_run(a: LabRunArgs) -> Result<bool> {
    let text =
        fs::read_to_string(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    // A scenario file carries [transfer] or [fairness]; anything else is a matrix.
    if let Ok(scenario) = toml::from_str::<ScenarioFile>(&text) {
        if scenario.transfer.is_some() || scenario.fairness.is_some() {
            return run_scenario(scenario, &a);
        }
    }
    let matrix: MatrixFile = toml::from_str(&text)?;
    let matrix = matrix.into_matrix()?;
    let results = run_matrix(&matrix)?;
    let failed = results.iter().any(|r| r.failures > 0);
    for r in results.iter().filter(|r| r.failures > 0) {
        eprintln!(
            "warning: {} {:?}/{} @ {} bytes: {}/{} repetitions failed ({})",
            r.topology,
            r.strategy,
            r.features,
            r.size,
            r.failures,
            r.reps,
            r.error.as_deref().unwrap_or("unknown error")
        );
    }
    match &a.out {
        Some(p) => write_cells_csv(&results, fs::File::create(p)?)?,
        None => write_cells_csv(&results, std::io::stdout().lock())?,
    }
    Ok(!failed)
}

fn run_scenario(scenario: ScenarioFile, a: &LabRunArgs) -> Result<bool> {
    let topo = scenario.topology();
    if let Some(t) = scenario.transfer {
        let spec = t.into_spec(topo);
        let (result, trace) = run_transfer_traced(&spec)?;
        if let Some(p) = &a.trace {
            write_trace(p, &trace)?;
        }
        println!(
            "state {:?}  ttfb {:.3} ms  completion {:.3} ms  bytes {}  digest_ok {}  events {}  drops {}",
            result.state,
            result.ttfb_ms,
            result.completion_ms,
            result.bytes,
            result.digest_ok,
            result.events,
            result.drops
        );
        return Ok(result.digest_ok);
    }
    if let Some(f) = scenario.fairness {
        let spec = f.into_spec(topo);
        let result = run_fairness(&spec)?;
        let shares = result.mean_shares();
        for (i, share) in shares.iter().enumerate() {
            println!(
                "flow {i}: state {:?}  completion {:.1} ms  mean overlap share {:.3}",
                result.states[i], result.completion_ms[i], share
            );
        }
        if std::env::var_os("OCD_FAIRNESS_SERIES").is_some() {
            for (i, series) in result.series.iter().enumerate() {
                let kb: Vec<String> =
                    series.iter().map(|b| format!("{}", b / 1000)).collect();
                println!("flow {i} per-window kB: {}", kb.join(" "));
            }
        }
        return Ok(true);
    }
    bail!("scenario file has neither [transfer] nor [fairness]");
}

fn cmd_lab_report(a: LabReportArgs) -> Result<bool> {
    let baseline = match a.baseline.as_str() {
        "e2e" => Strategy::E2e,
        "nosplit_relay" | "nosplit" => Strategy::NosplitRelay,
        "split" => Strategy::Split,
        other => bail!("unknown baseline strategy {other:?}"),
    };
    let results = read_cells_csv(fs::File::open(&a.csv)?)?;
    let report = improvement_report(&results, baseline)?;
    println!("{:<12} {:>12} {:<16} {:<12} {:>8}", "topology", "size", "strategy", "features", "ratio");
    for row in &report.rows {
        println!(
            "{:<12} {:>12} {:<16} {:<12} {:>7.3}x{}",
            row.topology,
            row.size,
            format!("{:?}", row.strategy),
            row.features,
            row.ratio,
            if row.regression { "  (regression)" } else { "" }
        );
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(true)
}

fn cmd_lab_sweep(a: LabSweepArgs) -> Result<bool> {
    let kind = match a.estimator {
        SweepEstimator::Nosplit => EstimatorKind::Nosplit,
        SweepEstimator::MidRelay => EstimatorKind::MidRelay,
    };
    let points = rtt_sweep(kind, a.topologies, a.seed)?;
    println!("estimate,actual");
    for p in &points {
        println!("{:.4},{:.4}", p.estimate, p.actual);
    }
    let rho = spearman(&points);
    eprintln!("spearman rank correlation: {rho:.3} over {} topologies", points.len());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Model(a) => cmd_model(a).map(|_| true),
        Cmd::Plan(a) => cmd_plan(a).map(|_| true),
        Cmd::Relay(a) => cmd_relay(a).map(|_| true),
        Cmd::Lab(LabCmd::Run(a)) => cmd_lab_run(a),
        Cmd::Lab(LabCmd::Report(a)) => cmd_lab_report(a),
        Cmd::Lab(LabCmd::Sweep(a)) => cmd_lab_sweep(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
