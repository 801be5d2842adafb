//! Canned lab experiments: single transfers under a delivery strategy and
//! multi-flow fairness runs, plus the TOML scenario format used by the CLI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    reference_relay_path, reference_topology, FeatureSet, Role, Topology, TopologyFile,
    TransportParams,
};
use crate::netlab::sim::{expected_digest, sock_of, FlowState, Sim, SimAddr, MS};
use crate::relay::config::RelayConfig;
use crate::timing::Strategy;

pub const SERVER_PORT: u16 = 80;
pub const RELAY_CLIENT_PORT: u16 = 5000;
pub const RELAY_PEER_PORT: u16 = 7000;

/// Flows start this long after t=0 so relay pool pre-fill (which needs a
/// full relay-to-relay handshake) has finished. Timings are measured from
/// each flow's own SYN, so the offset never shows up in results.
pub const WARMUP_NS: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("path must start at a client and end at a server")]
    BadPath,
    #[error("split strategy needs at least two relays on the path")]
    NotEnoughRelays,
    #[error("unknown host {0}")]
    UnknownHost(String),
    #[error("strategy {0:?} cannot run in the lab")]
    Unsupported(Strategy),
}

/// One client download through the lab under a given delivery strategy.
#[derive(Debug, Clone)]
pub struct TransferSpec {
    pub topology: Topology,
    pub strategy: Strategy,
    pub features: FeatureSet,
    /// Relay route client → ... → server; e2e ignores the interior.
    pub path: Vec<String>,
    pub file_size: u64,
    pub seed: u64,
    pub client_params: TransportParams,
    pub server_params: TransportParams,
    pub external_params: TransportParams,
    pub intra_cloud_params: TransportParams,
    pub fork_delay_ms: f64,
}

impl TransferSpec {
    pub fn new(
        topology: Topology,
        strategy: Strategy,
        features: FeatureSet,
        path: Vec<String>,
        file_size: u64,
    ) -> TransferSpec {
        TransferSpec {
            topology,
            strategy,
            features,
            path,
            file_size,
            seed: 1,
            client_params: TransportParams::default(),
            server_params: TransportParams::default(),
            external_params: TransportParams::default(),
            intra_cloud_params: TransportParams::turbo(),
            fork_delay_ms: crate::timing::DEFAULT_FORK_DELAY_MS,
        }
    }

    /// The reference four-host layout with its relay route.
    pub fn reference(strategy: Strategy, features: FeatureSet, file_size: u64) -> TransferSpec {
        TransferSpec::new(
            reference_topology(),
            strategy,
            features,
            reference_relay_path(),
            file_size,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub ttfb_ms: f64,
    pub completion_ms: f64,
    pub bytes: u64,
    pub digest_ok: bool,
    pub state: FlowState,
    pub events: u64,
    pub drops: u64,
}

/// Hop route for an end-to-end flow: the direct link when one exists (the
/// BGP path, even if slower), otherwise the lowest-latency route.
fn e2e_route(topo: &Topology, client: &str, server: &str) -> Result<Vec<usize>, ScenarioError> {
    let c = topo.host_index(client).ok_or_else(|| ScenarioError::UnknownHost(client.into()))?;
    let s = topo.host_index(server).ok_or_else(|| ScenarioError::UnknownHost(server.into()))?;
    let direct = topo.links.iter().any(|l| l.src == client && l.dst == server);
    if direct {
        return Ok(vec![c, s]);
    }
    let path = topo
        .shortest_path(client, server)
        .ok_or_else(|| ScenarioError::UnknownHost(server.into()))?;
    path.iter()
        .map(|n| topo.host_index(n).ok_or_else(|| ScenarioError::UnknownHost(n.clone())))
        .collect()
}

fn nodes_of(sim: &Sim, topo: &Topology, path: &[String]) -> Result<Vec<usize>, ScenarioError> {
    let _ = sim;
    path.iter()
        .map(|n| topo.host_index(n).ok_or_else(|| ScenarioError::UnknownHost(n.clone())))
        .collect()
}

/// Installs the relay chain for `path` (every interior relay-role host)
/// and returns the ingress relay address the client should dial.
pub fn install_relay_chain(
    sim: &mut Sim,
    topo: &Topology,
    path: &[String],
    features: FeatureSet,
    spec: &TransferSpec,
) -> Result<SimAddr, ScenarioError> {
    let nodes = nodes_of(sim, topo, path)?;
    let relays: Vec<usize> = nodes[1..nodes.len() - 1]
        .iter()
        .copied()
        .filter(|&n| topo.hosts[n].role == Role::Relay)
        .collect();
    if relays.len() < 2 {
        return Err(ScenarioError::NotEnoughRelays);
    }
    let server = *nodes.last().unwrap();
    let server_addr = sock_of(SimAddr { node: server, port: SERVER_PORT });
    // Force dials to follow the declared hop path.
    for w in nodes.windows(2) {
        sim.set_path(w[0], w[1], vec![w[0], w[1]]);
    }
    for (i, &node) in relays.iter().enumerate() {
        let listen = sock_of(SimAddr { node, port: RELAY_CLIENT_PORT });
        let peer_listen = sock_of(SimAddr { node, port: RELAY_PEER_PORT });
        let mut cfg = RelayConfig::new(listen, peer_listen);
        cfg.features = features;
        cfg.external_params = spec.external_params;
        cfg.intra_cloud_params = spec.intra_cloud_params;
        cfg.fork_delay_ms = spec.fork_delay_ms;
        let next_peer = relays
            .get(i + 1)
            .map(|&n| sock_of(SimAddr { node: n, port: RELAY_PEER_PORT }));
        if i == 0 {
            cfg.routes.push(crate::relay::config::RouteRule {
                listen_port: RELAY_CLIENT_PORT,
                dest: server_addr,
                via: next_peer,
            });
        } else if let Some(via) = next_peer {
            cfg.forward_rules.push(crate::relay::config::ForwardRule {
                dest: server_addr,
                via,
            });
        }
        if let Some(peer) = next_peer {
            cfg.peer_relays.push(peer);
        }
        sim.install_relay(&topo.hosts[node].id, cfg);
    }
    Ok(SimAddr { node: relays[0], port: RELAY_CLIENT_PORT })
}

pub fn run_transfer(spec: &TransferSpec) -> Result<TransferResult, ScenarioError> {
    run_transfer_inner(spec, false).map(|(r, _)| r)
}

/// Like [`run_transfer`], but also returns the packet/connection trace.
pub fn run_transfer_traced(
    spec: &TransferSpec,
) -> Result<(TransferResult, Vec<crate::netlab::sim::TraceRow>), ScenarioError> {
    run_transfer_inner(spec, true)
}

fn run_transfer_inner(
    spec: &TransferSpec,
    trace: bool,
) -> Result<(TransferResult, Vec<crate::netlab::sim::TraceRow>), ScenarioError> {
    let topo = &spec.topology;
    let path = &spec.path;
    if path.len() < 2 {
        return Err(ScenarioError::BadPath);
    }
    let client = path.first().unwrap().clone();
    let server = path.last().unwrap().clone();
    let mut sim = Sim::new(topo, spec.seed);
    if trace {
        sim.enable_trace();
    }
    sim.install_server(&server, SERVER_PORT, spec.server_params);
    let server_node = topo
        .host_index(&server)
        .ok_or_else(|| ScenarioError::UnknownHost(server.clone()))?;
    let flow = match spec.strategy {
        Strategy::E2e => sim.add_flow(
            &client,
            SimAddr { node: server_node, port: SERVER_PORT },
            e2e_route(topo, &client, &server)?,
            spec.client_params,
            spec.file_size,
            WARMUP_NS,
            0,
        ),
        Strategy::NosplitRelay => {
            let nodes = nodes_of(&sim, topo, path)?;
            sim.add_flow(
                &client,
                SimAddr { node: server_node, port: SERVER_PORT },
                nodes,
                spec.client_params,
                spec.file_size,
                WARMUP_NS,
                0,
            )
        }
        Strategy::Split => {
            let ingress = install_relay_chain(&mut sim, topo, path, spec.features, spec)?;
            let client_node = topo
                .host_index(&client)
                .ok_or_else(|| ScenarioError::UnknownHost(client.clone()))?;
            sim.add_flow(
                &client,
                ingress,
                vec![client_node, ingress.node],
                spec.client_params,
                spec.file_size,
                WARMUP_NS,
                0,
            )
        }
        other => return Err(ScenarioError::Unsupported(other)),
    };
    sim.run_until_idle();
    let f = &sim.flows[flow];
    let result = TransferResult {
        ttfb_ms: f.ttfb_ms(),
        completion_ms: f.completion_ms(),
        bytes: f.bytes_received,
        digest_ok: f.digest() == expected_digest(spec.file_size),
        state: f.state,
        events: sim.events_processed(),
        drops: sim.link_drops(),
    };
    Ok((result, std::mem::take(&mut sim.trace)))
}

/// One competing flow in a fairness run.
#[derive(Debug, Clone)]
pub struct FairnessFlow {
    pub client: String,
    pub server: String,
    pub strategy: Strategy,
    /// Relay route for nosplit/split; e2e uses `[client, server]`.
    pub path: Vec<String>,
    pub file_size: u64,
    pub start_ms: f64,
}

#[derive(Debug, Clone)]
pub struct FairnessSpec {
    pub topology: Topology,
    pub flows: Vec<FairnessFlow>,
    pub features: FeatureSet,
    pub seed: u64,
    pub window_ms: f64,
    /// Small per-hop jitter to break phase locks between identical flows.
    pub jitter_us: u64,
    pub external_params: TransportParams,
    pub intra_cloud_params: TransportParams,
}

#[derive(Debug, Clone)]
pub struct FairnessResult {
    /// Bytes delivered per window, per flow.
    pub series: Vec<Vec<u64>>,
    pub states: Vec<FlowState>,
    pub completion_ms: Vec<f64>,
}

impl FairnessResult {
    /// Mean per-window share of each flow over windows where every flow was
    /// still running (between every start and the earliest finish).
    pub fn mean_shares(&self) -> Vec<f64> {
        let n = self.series.len();
        let longest = self.series.iter().map(Vec::len).max().unwrap_or(0);
        let active_end = self
            .series
            .iter()
            .map(Vec::len)
            .min()
            .unwrap_or(0)
            .min(longest);
        let mut shares = vec![0.0; n];
        let mut windows = 0u32;
        for w in 1..active_end.saturating_sub(1) {
            let total: u64 = self.series.iter().map(|s| *s.get(w).unwrap_or(&0)).sum();
            if total == 0 {
                continue;
            }
            windows += 1;
            for (i, s) in self.series.iter().enumerate() {
                shares[i] += *s.get(w).unwrap_or(&0) as f64 / total as f64;
            }
        }
        if windows > 0 {
            for s in &mut shares {
                *s /= windows as f64;
            }
        }
        shares
    }
}

pub fn run_fairness(spec: &FairnessSpec) -> Result<FairnessResult, ScenarioError> {
    let topo = &spec.topology;
    let mut sim = Sim::new(topo, spec.seed);
    sim.set_jitter_ns(spec.jitter_us * 1_000);
    let window_ns = (spec.window_ms * MS) as u64;
    // One shared relay chain per distinct split route.
    let mut chain_ingress: Vec<(Vec<String>, SimAddr)> = Vec::new();
    let mut flow_ids = Vec::new();
    for f in &spec.flows {
        let server_node = topo
            .host_index(&f.server)
            .ok_or_else(|| ScenarioError::UnknownHost(f.server.clone()))?;
        if !sim_has_server(&sim, server_node) {
            sim.install_server(&f.server, SERVER_PORT, TransportParams::default());
        }
        let client_node = topo
            .host_index(&f.client)
            .ok_or_else(|| ScenarioError::UnknownHost(f.client.clone()))?;
        let start_ns = WARMUP_NS + (f.start_ms * MS) as u64;
        let id = match f.strategy {
            Strategy::E2e => sim.add_flow(
                &f.client,
                SimAddr { node: server_node, port: SERVER_PORT },
                e2e_route(topo, &f.client, &f.server)?,
                TransportParams::default(),
                f.file_size,
                start_ns,
                window_ns,
            ),
            Strategy::NosplitRelay => {
                let nodes = nodes_of(&sim, topo, &f.path)?;
                sim.add_flow(
                    &f.client,
                    SimAddr { node: server_node, port: SERVER_PORT },
                    nodes,
                    TransportParams::default(),
                    f.file_size,
                    start_ns,
                    window_ns,
                )
            }
            Strategy::Split => {
                let ingress = match chain_ingress.iter().find(|(p, _)| p == &f.path) {
                    Some((_, addr)) => *addr,
                    None => {
                        let tspec = TransferSpec {
                            external_params: spec.external_params,
                            intra_cloud_params: spec.intra_cloud_params,
                            ..TransferSpec::new(
                                topo.clone(),
                                Strategy::Split,
                                spec.features,
                                f.path.clone(),
                                f.file_size,
                            )
                        };
                        let addr =
                            install_relay_chain(&mut sim, topo, &f.path, spec.features, &tspec)?;
                        chain_ingress.push((f.path.clone(), addr));
                        addr
                    }
                };
                sim.add_flow(
                    &f.client,
                    ingress,
                    vec![client_node, ingress.node],
                    TransportParams::default(),
                    f.file_size,
                    start_ns,
                    window_ns,
                )
            }
            other => return Err(ScenarioError::Unsupported(other)),
        };
        flow_ids.push(id);
    }
    sim.run_until_idle();
    Ok(FairnessResult {
        series: flow_ids.iter().map(|&i| sim.flows[i].series.clone()).collect(),
        states: flow_ids.iter().map(|&i| sim.flows[i].state).collect(),
        completion_ms: flow_ids.iter().map(|&i| sim.flows[i].completion_ms()).collect(),
    })
}

fn sim_has_server(sim: &Sim, _node: usize) -> bool {
    let _ = sim;
    // Installing a server twice on the same (node, port) is idempotent in
    // effect (the listener is replaced by an identical one).
    false
}

// ---- scenario files for the CLI ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferToml {
    pub strategy: Strategy,
    #[serde(default)]
    pub features: FeatureSet,
    pub path: Vec<String>,
    pub file_size: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub client_rwnd: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessFlowToml {
    pub client: String,
    pub server: String,
    pub strategy: Strategy,
    #[serde(default)]
    pub path: Vec<String>,
    pub file_size: u64,
    #[serde(default)]
    pub start_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessToml {
    pub flows: Vec<FairnessFlowToml>,
    #[serde(default)]
    pub features: FeatureSet,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_window_ms")]
    pub window_ms: f64,
    #[serde(default = "default_jitter_us")]
    pub jitter_us: u64,
}

fn default_seed() -> u64 {
    1
}
fn default_window_ms() -> f64 {
    1000.0
}
fn default_jitter_us() -> u64 {
    50
}

/// On-disk scenario: an optional inline topology (reference layout when
/// omitted) plus exactly one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(default)]
    pub topology: Option<TopologyFile>,
    #[serde(default)]
    pub transfer: Option<TransferToml>,
    #[serde(default)]
    pub fairness: Option<FairnessToml>,
}

impl TransferToml {
    pub fn into_spec(self, topology: Topology) -> TransferSpec {
        let mut spec =
            TransferSpec::new(topology, self.strategy, self.features, self.path, self.file_size);
        spec.seed = self.seed;
        if let Some(rwnd) = self.client_rwnd {
            spec.client_params.rwnd = rwnd;
            spec.client_params.recv_buffer = rwnd;
        }
        spec
    }
}

impl FairnessToml {
    pub fn into_spec(self, topology: Topology) -> FairnessSpec {
        FairnessSpec {
            topology,
            flows: self
                .flows
                .into_iter()
                .map(|f| FairnessFlow {
                    client: f.client,
                    server: f.server,
                    strategy: f.strategy,
                    path: f.path,
                    file_size: f.file_size,
                    start_ms: f.start_ms,
                })
                .collect(),
            features: self.features,
            seed: self.seed,
            window_ms: self.window_ms,
            jitter_us: self.jitter_us,
            external_params: TransportParams::default(),
            intra_cloud_params: TransportParams::turbo(),
        }
    }
}

impl ScenarioFile {
    pub fn topology(&self) -> Topology {
        match &self.topology {
            Some(t) => t.clone().into_topology(),
            None => reference_topology(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::{timing, Scenario};

    #[test]
    fn split_ladder_matches_analytic_ttfb_on_reference_topology() {
        // Every feature rung of the mechanistic lab agrees with the
        // closed-form split timing to within a couple of milliseconds.
        for (label, features) in FeatureSet::ladder() {
            let spec = TransferSpec::reference(Strategy::Split, features, 10_000);
            let got = run_transfer(&spec).unwrap();
            assert_eq!(got.state, FlowState::Done, "{label}");
            assert!(got.digest_ok, "{label}");
            let mut scen = Scenario::new(
                reference_topology(),
                Strategy::Split,
                reference_relay_path(),
                10_000,
            );
            scen.features = features;
            let want = timing(&scen).unwrap();
            assert!(
                (got.ttfb_ms - want.ttfb_ms()).abs() < 2.0,
                "{label}: lab ttfb {} vs model {}",
                got.ttfb_ms,
                want.ttfb_ms()
            );
        }
    }

    #[test]
    fn pied_piper_reference_ttfb() {
        let spec =
            TransferSpec::reference(Strategy::Split, FeatureSet::pied_piper(), 10_000);
        let got = run_transfer(&spec).unwrap();
        // 2*rtt(client,rc) + one-way(rc,rs) + one-way(rs,server) legs:
        // 65.4 + 215 + 26 = 306.4 ms.
        assert!((got.ttfb_ms - 306.4).abs() < 2.0, "ttfb {}", got.ttfb_ms);
    }

    #[test]
    fn split_completion_tracks_analytic_for_large_files() {
        for (label, features) in FeatureSet::ladder() {
            let spec = TransferSpec::reference(Strategy::Split, features, 1_000_000);
            let got = run_transfer(&spec).unwrap();
            let mut scen = Scenario::new(
                reference_topology(),
                Strategy::Split,
                reference_relay_path(),
                1_000_000,
            );
            scen.features = features;
            let want = timing(&scen).unwrap();
            assert!(
                (got.completion_ms - want.completion_ms()).abs()
                    < want.completion_ms() * 0.05 + 5.0,
                "{label}: lab completion {} vs model {}",
                got.completion_ms,
                want.completion_ms()
            );
        }
    }

    #[test]
    fn scenario_file_round_trips() {
        let text = r#"
            [transfer]
            strategy = "split"
            path = ["client", "rc", "rs", "server"]
            file_size = 100000
            [transfer.features]
            early_syn = true
            thread_pool = true
        "#;
        let file: ScenarioFile = toml::from_str(text).unwrap();
        let t = file.transfer.as_ref().unwrap();
        assert_eq!(t.strategy, Strategy::Split);
        assert!(t.features.early_syn && t.features.thread_pool);
        assert!(!t.features.connection_pool);
        assert_eq!(file.topology().hosts.len(), 4);
    }
}
