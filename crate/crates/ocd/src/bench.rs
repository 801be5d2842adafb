//! Experiment orchestration: runs strategy × features × size matrices over
//! the network lab (or a loopback socket smoke tier), computes median
//! timing tables and improvement ratios, and generates estimator-vs-actual
//! sweeps over random topologies.

use std::io::{Read as _, Write as _};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    reference_relay_path, reference_topology, FeatureSet, Host, Link, Role, Topology,
    TopologyFile, Zone,
};
use crate::netlab::scenario::{run_transfer, ScenarioError, TransferSpec};
use crate::netlab::FlowState;
use crate::timing::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Netlab,
    RealSockets,
}

#[derive(Debug, Clone)]
pub struct MatrixTopology {
    pub name: String,
    pub topology: Topology,
    /// Relay route client → relays → server used by nosplit/split cells.
    pub path: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentMatrix {
    pub topologies: Vec<MatrixTopology>,
    pub strategies: Vec<Strategy>,
    pub feature_sets: Vec<(String, FeatureSet)>,
    pub sizes: Vec<u64>,
    pub repetitions: u32,
    pub mode: BenchMode,
    pub seed: u64,
    /// Cell-level parallelism (each cell's repetitions stay sequential).
    pub parallelism: usize,
    /// Server-side think time for the real-socket smoke tier.
    pub artificial_delay_ms: u64,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        ExperimentMatrix {
            topologies: vec![MatrixTopology {
                name: "reference".into(),
                topology: reference_topology(),
                path: reference_relay_path(),
            }],
            strategies: vec![Strategy::E2e, Strategy::NosplitRelay, Strategy::Split],
            feature_sets: FeatureSet::ladder()
                .into_iter()
                .map(|(l, f)| (l.to_string(), f))
                .collect(),
            sizes: vec![
                10 * 1000,
                100 * 1000,
                1_000_000,
                10_000_000,
                100_000_000,
            ],
            repetitions: 50,
            mode: BenchMode::Netlab,
            seed: 1,
            parallelism: 4,
            artificial_delay_ms: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("matrix needs at least one repetition")]
    NoRepetitions,
    #[error("baseline strategy {0:?} not present in results")]
    MissingBaseline(Strategy),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellResult {
    pub topology: String,
    pub strategy: Strategy,
    pub features: String,
    pub size: u64,
    pub reps: u32,
    pub median_ttfb_ms: f64,
    pub median_completion_ms: f64,
    pub mean_throughput_bps: f64,
    pub failures: u32,
    #[serde(default)]
    pub error: Option<String>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

struct Cell {
    topo: usize,
    strategy: Strategy,
    features: (String, FeatureSet),
    size: u64,
}

/// Expands the matrix into cells. Feature sets only multiply the split
/// strategy; e2e and nosplit have no features to vary.
fn cells(m: &ExperimentMatrix) -> Vec<Cell> {
    let mut out = Vec::new();
    for (ti, _) in m.topologies.iter().enumerate() {
        for &strategy in &m.strategies {
            for size in &m.sizes {
                if strategy == Strategy::Split {
                    for fs in &m.feature_sets {
                        out.push(Cell {
                            topo: ti,
                            strategy,
                            features: fs.clone(),
                            size: *size,
                        });
                    }
                } else {
                    out.push(Cell {
                        topo: ti,
                        strategy,
                        features: ("-".into(), FeatureSet::default()),
                        size: *size,
                    });
                }
            }
        }
    }
    out
}

fn run_cell(m: &ExperimentMatrix, cell: &Cell) -> CellResult {
    let topo = &m.topologies[cell.topo];
    let mut ttfbs = Vec::new();
    let mut completions = Vec::new();
    let mut throughputs = Vec::new();
    let mut failures = 0;
    let mut error = None;
    for rep in 0..m.repetitions {
        let outcome = match m.mode {
            BenchMode::Netlab => {
                let mut spec = TransferSpec::new(
                    topo.topology.clone(),
                    cell.strategy,
                    cell.features.1,
                    topo.path.clone(),
                    cell.size,
                );
                spec.seed = m.seed.wrapping_add(rep as u64);
                run_transfer(&spec).map_err(|e| e.to_string()).and_then(|r| {
                    if r.state == FlowState::Done && r.digest_ok {
                        Ok((r.ttfb_ms, r.completion_ms))
                    } else {
                        Err(format!("flow ended in {:?}", r.state))
                    }
                })
            }
            BenchMode::RealSockets => {
                run_loopback(cell.strategy, cell.features.1, cell.size, m.artificial_delay_ms)
            }
        };
        match outcome {
            Ok((ttfb, completion)) => {
                ttfbs.push(ttfb);
                completions.push(completion);
                throughputs.push(cell.size as f64 / (completion / 1e3));
            }
            Err(e) => {
                failures += 1;
                error.get_or_insert(e);
            }
        }
    }
    let mean_tp = if throughputs.is_empty() {
        f64::NAN
    } else {
        throughputs.iter().sum::<f64>() / throughputs.len() as f64
    };
    CellResult {
        topology: topo.name.clone(),
        strategy: cell.strategy,
        features: cell.features.0.clone(),
        size: cell.size,
        reps: m.repetitions,
        median_ttfb_ms: median(&mut ttfbs),
        median_completion_ms: median(&mut completions),
        mean_throughput_bps: mean_tp,
        failures,
        error,
    }
}

/// Runs every cell of the matrix. Cell failures are recorded in the row
/// and never abort the rest of the matrix.
pub fn run_matrix(m: &ExperimentMatrix) -> Result<Vec<CellResult>, BenchError> {
    if m.repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let cells = cells(m);
    let workers = m.parallelism.max(1);
    let mut results: Vec<Option<CellResult>> = Vec::new();
    results.resize_with(cells.len(), || None);
    for chunk in cells
        .iter()
        .enumerate()
        .collect::<Vec<_>>()
        .chunks(workers)
    {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(i, cell)| (*i, s.spawn(move || run_cell(m, cell))))
                .collect();
            for (i, h) in handles {
                results[i] = Some(h.join().expect("cell worker panicked"));
            }
        });
    }
    Ok(results.into_iter().map(Option::unwrap).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRow {
    pub topology: String,
    pub size: u64,
    pub strategy: Strategy,
    pub features: String,
    /// baseline completion / variant completion.
    pub ratio: f64,
    /// Set when the variant is slower than the baseline.
    pub regression: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ImprovementReport {
    pub rows: Vec<RatioRow>,
    pub warnings: Vec<String>,
}

/// Completion-time ratios of every cell against the per-topology,
/// per-size baseline strategy. Cells slower than the baseline are flagged,
/// not erased — small files are expected to regress under a bare split.
pub fn improvement_report(
    results: &[CellResult],
    baseline_strategy: Strategy,
) -> Result<ImprovementReport, BenchError> {
    if !results.iter().any(|r| r.strategy == baseline_strategy) {
        return Err(BenchError::MissingBaseline(baseline_strategy));
    }
    let mut report = ImprovementReport::default();
    for cell in results {
        if cell.strategy == baseline_strategy {
            continue;
        }
        let base = results.iter().find(|r| {
            r.strategy == baseline_strategy && r.topology == cell.topology && r.size == cell.size
        });
        let Some(base) = base else {
            report.warnings.push(format!(
                "no {:?} baseline for {} @ {} bytes; cell skipped",
                baseline_strategy, cell.topology, cell.size
            ));
            continue;
        };
        if !base.median_completion_ms.is_finite() || !cell.median_completion_ms.is_finite() {
            report.warnings.push(format!(
                "unusable timing for {} {:?}/{} @ {} bytes; cell skipped",
                cell.topology, cell.strategy, cell.features, cell.size
            ));
            continue;
        }
        let ratio = base.median_completion_ms / cell.median_completion_ms;
        report.rows.push(RatioRow {
            topology: cell.topology.clone(),
            size: cell.size,
            strategy: cell.strategy,
            features: cell.features.clone(),
            ratio,
            regression: ratio < 1.0,
        });
    }
    Ok(report)
}

// ---- CSV round-trip ----

pub fn write_cells_csv<W: std::io::Write>(
    results: &[CellResult],
    w: W,
) -> Result<(), BenchError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in results {
        wtr.serialize(r).map_err(|e| BenchError::Csv(e.to_string()))?;
    }
    wtr.flush().map_err(|e| BenchError::Csv(e.to_string()))?;
    Ok(())
}

pub fn read_cells_csv<R: std::io::Read>(r: R) -> Result<Vec<CellResult>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e| BenchError::Csv(e.to_string()))?);
    }
    Ok(out)
}

// ---- estimator sweeps ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// No-split detour estimate: rtt(e2e) / rtt(via relays).
    Nosplit,
    /// Mid-relay insertion: rtt(rc,rs) / max(rtt(rc,mid), rtt(mid,rs)).
    MidRelay,
}

fn host(id: &str, role: Role, zone: Zone) -> Host {
    Host { id: id.into(), role, zone }
}

fn link(src: &str, dst: &str, latency_ms: f64) -> Vec<Link> {
    [(src, dst), (dst, src)]
        .into_iter()
        .map(|(s, d)| Link {
            src: s.into(),
            dst: d.into(),
            latency_ms,
            bandwidth: 12.5e9,
            loss_rate: 0.0,
            queue_capacity: 1_000_000,
        })
        .collect()
}

fn random_detour_topology(rng: &mut ChaCha8Rng) -> Topology {
    // Direct path vs a two-relay detour whose total may beat or lose to it.
    let direct = rng.gen_range(40.0..150.0);
    let a = rng.gen_range(5.0..40.0);
    let m = rng.gen_range(20.0..120.0);
    let b = rng.gen_range(5.0..40.0);
    let mut links = Vec::new();
    links.extend(link("client", "server", direct));
    links.extend(link("client", "rc", a));
    links.extend(link("rc", "rs", m));
    links.extend(link("rs", "server", b));
    Topology::new(
        vec![
            host("client", Role::Client, Zone::Internet),
            host("rc", Role::Relay, Zone::Cloud),
            host("rs", Role::Relay, Zone::Cloud),
            host("server", Role::Server, Zone::Internet),
        ],
        links,
    )
}

fn random_midrelay_topology(rng: &mut ChaCha8Rng) -> Topology {
    // A long rc–rs hop that a mid relay may or may not shorten usefully.
    let a = rng.gen_range(5.0..25.0);
    let c = rng.gen_range(40.0..150.0);
    let split = rng.gen_range(0.2..0.8);
    let detour = rng.gen_range(0.9..1.4);
    let u = c * split * detour;
    let v = c * (1.0 - split) * detour;
    let b = rng.gen_range(5.0..25.0);
    let mut links = Vec::new();
    links.extend(link("client", "rc", a));
    links.extend(link("rc", "rs", c));
    links.extend(link("rc", "rm", u));
    links.extend(link("rm", "rs", v));
    links.extend(link("rs", "server", b));
    Topology::new(
        vec![
            host("client", Role::Client, Zone::Internet),
            host("rc", Role::Relay, Zone::Cloud),
            host("rm", Role::Relay, Zone::Cloud),
            host("rs", Role::Relay, Zone::Cloud),
            host("server", Role::Server, Zone::Internet),
        ],
        links,
    )
}

/// One sweep point: the planner's predicted gain and the lab-measured one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub estimate: f64,
    pub actual: f64,
}

/// Draws `n` random topologies and, for each, pairs the planner estimator
/// with the gain the lab actually measures.
pub fn rtt_sweep(kind: EstimatorKind, n: usize, seed: u64) -> Result<Vec<SweepPoint>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let point = match kind {
            EstimatorKind::Nosplit => {
                let topo = random_detour_topology(&mut rng);
                let rtt_e2e = topo.rtt("client", "server").unwrap();
                let via = topo.rtt("client", "rc").unwrap()
                    + topo.rtt("rc", "rs").unwrap()
                    + topo.rtt("rs", "server").unwrap();
                let estimate = crate::planner::estimate_nosplit_gain(rtt_e2e, via);
                let path: Vec<String> =
                    ["client", "rc", "rs", "server"].iter().map(|s| s.to_string()).collect();
                let mut e2e = TransferSpec::new(
                    topo.clone(),
                    Strategy::E2e,
                    FeatureSet::default(),
                    path.clone(),
                    10_000,
                );
                e2e.seed = seed.wrapping_add(i as u64);
                let mut nosplit = TransferSpec::new(
                    topo,
                    Strategy::NosplitRelay,
                    FeatureSet::default(),
                    path,
                    10_000,
                );
                nosplit.seed = e2e.seed;
                let e2e = run_transfer(&e2e)?;
                let nosplit = run_transfer(&nosplit)?;
                SweepPoint {
                    estimate,
                    actual: e2e.completion_ms / nosplit.completion_ms,
                }
            }
            EstimatorKind::MidRelay => {
                let topo = random_midrelay_topology(&mut rng);
                let estimate = crate::planner::estimate_midrelay_gain(
                    topo.rtt("rc", "rs").unwrap(),
                    topo.rtt("rc", "rm").unwrap(),
                    topo.rtt("rm", "rs").unwrap(),
                );
                let two: Vec<String> =
                    ["client", "rc", "rs", "server"].iter().map(|s| s.to_string()).collect();
                let three: Vec<String> = ["client", "rc", "rm", "rs", "server"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                let features = FeatureSet {
                    thread_pool: true,
                    early_syn: true,
                    ..FeatureSet::default()
                };
                let mut without =
                    TransferSpec::new(topo.clone(), Strategy::Split, features, two, 1_000_000);
                without.seed = seed.wrapping_add(i as u64);
                let mut with =
                    TransferSpec::new(topo, Strategy::Split, features, three, 1_000_000);
                with.seed = without.seed;
                let without = run_transfer(&without)?;
                let with = run_transfer(&with)?;
                SweepPoint {
                    estimate,
                    actual: without.completion_ms / with.completion_ms,
                }
            }
        };
        out.push(point);
    }
    Ok(out)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(points: &[SweepPoint]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.estimate).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.actual).collect();
    let rx = ranks(&xs);
    let ry = ranks(&ys);
    let n = rx.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..rx.len() {
        let a = rx[i] - mx;
        let b = ry[i] - my;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

// ---- real-socket smoke tier ----

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn spawn_loopback_server(delay: Duration) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            std::thread::spawn(move || {
                let mut req = Vec::new();
                let mut byte = [0u8; 1];
                while let Ok(1) = stream.read(&mut byte) {
                    if byte[0] == b'\n' {
                        break;
                    }
                    req.push(byte[0]);
                }
                let n: u64 = String::from_utf8_lossy(&req)
                    .strip_prefix("GET ")
                    .and_then(|s| s.trim().parse().ok())
                    .unwrap_or(0);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                let mut sent = 0u64;
                let mut buf = vec![0u8; 64 * 1024];
                while sent < n {
                    let chunk = ((n - sent) as usize).min(buf.len());
                    for (j, b) in buf[..chunk].iter_mut().enumerate() {
                        *b = ((sent + j as u64) % 251) as u8;
                    }
                    if stream.write_all(&buf[..chunk]).is_err() {
                        return;
                    }
                    sent += chunk as u64;
                }
            });
        }
    });
    addr
}

fn measure_download(addr: std::net::SocketAddr, size: u64) -> Result<(f64, f64), String> {
    let start = Instant::now();
    let mut stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    stream.set_nodelay(true).ok();
    stream
        .write_all(format!("GET {size}\n").as_bytes())
        .map_err(|e| e.to_string())?;
    stream.shutdown(std::net::Shutdown::Write).ok();
    let mut buf = vec![0u8; 64 * 1024];
    let mut got = 0u64;
    let mut ttfb = None;
    loop {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(k) => {
                ttfb.get_or_insert_with(|| start.elapsed());
                got += k as u64;
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    if got != size {
        return Err(format!("short read: {got} of {size} bytes"));
    }
    let completion = start.elapsed();
    Ok((
        ttfb.unwrap_or(completion).as_secs_f64() * 1e3,
        completion.as_secs_f64() * 1e3,
    ))
}

fn run_loopback(
    strategy: Strategy,
    features: FeatureSet,
    size: u64,
    delay_ms: u64,
) -> Result<(f64, f64), String> {
    use crate::relay::config::{RelayConfig, RouteRule};
    use crate::relay::socket::SocketRelay;
    let server = spawn_loopback_server(Duration::from_millis(delay_ms));
    match strategy {
        Strategy::E2e => measure_download(server, size),
        Strategy::Split => {
            let rs_peer = free_port();
            let rc_listen = free_port();
            let mut rs_cfg = RelayConfig::new(
                format!("127.0.0.1:{}", free_port()).parse().unwrap(),
                format!("127.0.0.1:{rs_peer}").parse().unwrap(),
            );
            rs_cfg.features = features;
            let _rs = SocketRelay::start(rs_cfg).map_err(|e| e.to_string())?;
            let mut rc_cfg = RelayConfig::new(
                format!("127.0.0.1:{rc_listen}").parse().unwrap(),
                format!("127.0.0.1:{}", free_port()).parse().unwrap(),
            );
            rc_cfg.features = features;
            let via: std::net::SocketAddr = format!("127.0.0.1:{rs_peer}").parse().unwrap();
            rc_cfg.routes.push(RouteRule {
                listen_port: rc_listen,
                dest: server,
                via: Some(via),
            });
            rc_cfg.peer_relays.push(via);
            let _rc = SocketRelay::start(rc_cfg).map_err(|e| e.to_string())?;
            measure_download(format!("127.0.0.1:{rc_listen}").parse().unwrap(), size)
        }
        other => Err(format!("{other:?} is not supported on the loopback tier")),
    }
}

// ---- matrix files for the CLI ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixTopologyToml {
    pub name: String,
    #[serde(default)]
    pub topology: Option<TopologyFile>,
    #[serde(default)]
    pub path: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    #[serde(default)]
    pub mode: Option<BenchMode>,
    #[serde(default)]
    pub strategies: Option<Vec<Strategy>>,
    #[serde(default)]
    pub feature_sets: Option<Vec<String>>,
    #[serde(default)]
    pub sizes: Option<Vec<u64>>,
    #[serde(default)]
    pub repetitions: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub artificial_delay_ms: Option<u64>,
    #[serde(default)]
    pub topologies: Vec<MatrixTopologyToml>,
}

impl MatrixFile {
    pub fn into_matrix(self) -> Result<ExperimentMatrix, BenchError> {
        let mut m = ExperimentMatrix::default();
        if let Some(mode) = self.mode {
            m.mode = mode;
        }
        if let Some(s) = self.strategies {
            m.strategies = s;
        }
        if let Some(labels) = self.feature_sets {
            let ladder = FeatureSet::ladder();
            m.feature_sets = labels
                .iter()
                .map(|l| {
                    ladder
                        .iter()
                        .find(|(name, _)| name == l)
                        .map(|(name, f)| (name.to_string(), *f))
                        .ok_or_else(|| BenchError::Csv(format!("unknown feature set {l}")))
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(s) = self.sizes {
            m.sizes = s;
        }
        if let Some(r) = self.repetitions {
            m.repetitions = r;
        }
        if let Some(s) = self.seed {
            m.seed = s;
        }
        if let Some(p) = self.parallelism {
            m.parallelism = p;
        }
        if let Some(d) = self.artificial_delay_ms {
            m.artificial_delay_ms = d;
        }
        if !self.topologies.is_empty() {
            m.topologies = self
                .topologies
                .into_iter()
                .map(|t| MatrixTopology {
                    name: t.name,
                    topology: t
                        .topology
                        .map(TopologyFile::into_topology)
                        .unwrap_or_else(reference_topology),
                    path: t.path.unwrap_or_else(reference_relay_path),
                })
                .collect();
        }
        Ok(m)
    }
}
