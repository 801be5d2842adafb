//! Shared domain vocabulary: topologies, transport parameters, feature
//! flags and measurement records used by the timing model, the relay
//! engine, the network lab and the bench runner.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
    Relay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Internet,
    Cloud,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Host {
    pub id: String,
    pub role: Role,
    pub zone: Zone,
}

/// A directed link. Symmetric topologies declare each physical link once in
/// the file format and get both directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Link {
    pub src: String,
    pub dst: String,
    /// One-way propagation delay, milliseconds.
    pub latency_ms: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    pub loss_rate: f64,
    /// Drop-tail queue capacity in packets.
    pub queue_capacity: usize,
}

pub const DEFAULT_INTERNET_QUEUE: usize = 64;
pub const DEFAULT_CLOUD_QUEUE: usize = 1024;

#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub hosts: Vec<Host>,
    pub links: Vec<Link>,
    index: HashMap<String, usize>,
}

impl Topology {
    pub fn new(hosts: Vec<Host>, links: Vec<Link>) -> Self {
        let index = hosts
            .iter()
            .enumerate()
            .map(|(i, h)| (h.id.clone(), i))
            .collect();
        Topology { hosts, links, index }
    }

    pub fn host_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn host(&self, id: &str) -> Option<&Host> {
        self.host_index(id).map(|i| &self.hosts[i])
    }

    pub fn link(&self, src: &str, dst: &str) -> Option<&Link> {
        self.links.iter().find(|l| l.src == src && l.dst == dst)
    }

    /// A link is intra-cloud iff both endpoints sit in the cloud zone.
    pub fn link_intra_cloud(&self, link: &Link) -> bool {
        matches!(
            (self.host(&link.src), self.host(&link.dst)),
            (Some(a), Some(b)) if a.zone == Zone::Cloud && b.zone == Zone::Cloud
        )
    }

    /// Lowest-latency path, Dijkstra over one-way latencies.
    pub fn shortest_path(&self, src: &str, dst: &str) -> Option<Vec<String>> {
        let s = self.host_index(src)?;
        let d = self.host_index(dst)?;
        let n = self.hosts.len();
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for l in &self.links {
            if let (Some(a), Some(b)) = (self.host_index(&l.src), self.host_index(&l.dst)) {
                adj[a].push((b, l.latency_ms));
            }
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut done = vec![false; n];
        dist[s] = 0.0;
        for _ in 0..n {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for i in 0..n {
                if !done[i] && dist[i] < best {
                    best = dist[i];
                    u = i;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            for &(v, w) in &adj[u] {
                if dist[u] + w < dist[v] {
                    dist[v] = dist[u] + w;
                    prev[v] = u;
                }
            }
        }
        if dist[d].is_infinite() {
            return None;
        }
        let mut path = vec![d];
        let mut cur = d;
        while cur != s {
            cur = prev[cur];
            path.push(cur);
        }
        path.reverse();
        Some(path.into_iter().map(|i| self.hosts[i].id.clone()).collect())
    }

    /// Sum of one-way latencies along an explicit hop list.
    pub fn path_latency_ms(&self, path: &[String]) -> Option<f64> {
        let mut total = 0.0;
        for w in path.windows(2) {
            total += self.link(&w[0], &w[1])?.latency_ms;
        }
        Some(total)
    }

    /// Derived RTT: twice the one-way latency of the path. The return path
    /// traverses the same links (symmetric routing model).
    pub fn rtt_over_path(&self, path: &[String]) -> Option<f64> {
        self.path_latency_ms(path).map(|l| 2.0 * l)
    }

    /// RTT over the lowest-latency path between two hosts.
    pub fn rtt(&self, a: &str, b: &str) -> Option<f64> {
        let path = self.shortest_path(a, b)?;
        self.rtt_over_path(&path)
    }

    /// Minimum bandwidth along a path, bytes/sec.
    pub fn path_bottleneck_bandwidth(&self, path: &[String]) -> Option<f64> {
        let mut min = f64::INFINITY;
        for w in path.windows(2) {
            min = min.min(self.link(&w[0], &w[1])?.bandwidth);
        }
        if min.is_finite() {
            Some(min)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportParams {
    /// Payload bytes per segment.
    pub mss: u32,
    /// Initial congestion window, segments.
    pub init_cwnd: u32,
    /// Receive window, bytes.
    pub rwnd: u64,
    pub send_buffer: u64,
    pub recv_buffer: u64,
    pub nagle_enabled: bool,
    pub turbo_start: bool,
}

impl Default for TransportParams {
    fn default() -> Self {
        TransportParams {
            mss: 1460,
            init_cwnd: 10,
            rwnd: 8 * 1024 * 1024,
            send_buffer: 16 * 1024 * 1024,
            recv_buffer: 16 * 1024 * 1024,
            nagle_enabled: false,
            turbo_start: false,
        }
    }
}

impl TransportParams {
    /// Intra-cloud parameters: large initial window so the cloud leg sends
    /// without probing, large windows and buffers so memory never limits it.
    pub fn turbo() -> Self {
        TransportParams {
            mss: 1460,
            init_cwnd: 10_000,
            rwnd: 64 * 1024 * 1024,
            send_buffer: 64 * 1024 * 1024,
            recv_buffer: 64 * 1024 * 1024,
            nagle_enabled: false,
            turbo_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSet {
    pub early_syn: bool,
    pub thread_pool: bool,
    pub connection_pool: bool,
    pub turbo_start: bool,
}

impl FeatureSet {
    /// All accelerations off; split still active.
    pub fn ocd_baseline() -> Self {
        FeatureSet::default()
    }

    /// All four accelerations on.
    pub fn pied_piper() -> Self {
        FeatureSet {
            early_syn: true,
            thread_pool: true,
            connection_pool: true,
            turbo_start: true,
        }
    }

    /// The successive-improvement ladder: baseline, +TP, +TP+ES, +TP+ES+CP,
    /// and the full bundle.
    pub fn ladder() -> Vec<(&'static str, FeatureSet)> {
        let mut f = FeatureSet::default();
        let mut out = vec![("baseline", f)];
        f.thread_pool = true;
        out.push(("+TP", f));
        f.early_syn = true;
        out.push(("+TP+ES", f));
        f.connection_pool = true;
        out.push(("+TP+ES+CP", f));
        f.turbo_start = true;
        out.push(("pied_piper", f));
        out
    }

    pub fn label(&self) -> String {
        if *self == FeatureSet::pied_piper() {
            return "pied_piper".into();
        }
        if *self == FeatureSet::default() {
            return "baseline".into();
        }
        let mut s = String::new();
        if self.thread_pool {
            s.push_str("+TP");
        }
        if self.early_syn {
            s.push_str("+ES");
        }
        if self.connection_pool {
            s.push_str("+CP");
        }
        if self.turbo_start {
            s.push_str("+TS");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermLabel {
    Handshake,
    Request,
    Fork,
    RelayHandshake,
    SlowStartRound,
    Serialization,
    Preamble,
}

impl fmt::Display for TermLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TermLabel::Handshake => "handshake",
            TermLabel::Request => "request",
            TermLabel::Fork => "fork",
            TermLabel::RelayHandshake => "relay_handshake",
            TermLabel::SlowStartRound => "slow_start_round",
            TermLabel::Serialization => "serialization",
            TermLabel::Preamble => "preamble",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingTerm {
    pub label: TermLabel,
    pub millis: f64,
    /// Whether this term lies on the path to the first byte.
    pub in_ttfb: bool,
}

/// TTFB and completion decomposed into named delay terms. The breakdown is
/// compositional: the ttfb-contributing terms sum to the TTFB exactly, and
/// all terms sum to the completion time.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub terms: Vec<TimingTerm>,
}

impl TimingBreakdown {
    pub fn push(&mut self, label: TermLabel, millis: f64, in_ttfb: bool) {
        self.terms.push(TimingTerm { label, millis, in_ttfb });
    }

    pub fn ttfb_ms(&self) -> f64 {
        self.terms.iter().filter(|t| t.in_ttfb).map(|t| t.millis).sum()
    }

    pub fn completion_ms(&self) -> f64 {
        self.terms.iter().map(|t| t.millis).sum()
    }
}

impl fmt::Display for TimingBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.terms {
            writeln!(
                f,
                "  {:<18} {:>12.3} ms{}",
                t.label.to_string(),
                t.millis,
                if t.in_ttfb { "  (ttfb)" } else { "" }
            )?;
        }
        writeln!(f, "  ttfb       = {:.3} ms", self.ttfb_ms())?;
        write!(f, "  completion = {:.3} ms", self.completion_ms())
    }
}

/// Per-transfer measurement emitted by the lab and by real-socket runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow_id: u64,
    pub bytes_transferred: u64,
    pub ttfb_ms: f64,
    pub completion_ms: f64,
    /// (window start seconds, bytes/sec), averaged over fixed windows.
    pub throughput_series: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateHostId(String),
    RelayNotInCloud(String),
    UnknownEndpoint { src: String, dst: String },
    NonPositiveLatency { src: String, dst: String },
    NonPositiveBandwidth { src: String, dst: String },
    InvalidLossRate { src: String, dst: String, loss: f64 },
    ZeroQueueCapacity { src: String, dst: String },
    Disconnected { client: String, server: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateHostId(id) => write!(f, "duplicate host id {id:?}"),
            Violation::RelayNotInCloud(id) => write!(f, "relay {id:?} must be cloud"),
            Violation::UnknownEndpoint { src, dst } => {
                write!(f, "link {src}->{dst} references unknown host")
            }
            Violation::NonPositiveLatency { src, dst } => {
                write!(f, "link {src}->{dst} has non-positive latency")
            }
            Violation::NonPositiveBandwidth { src, dst } => {
                write!(f, "link {src}->{dst} has non-positive bandwidth")
            }
            Violation::InvalidLossRate { src, dst, loss } => {
                write!(f, "link {src}->{dst} loss_rate {loss} outside [0,1)")
            }
            Violation::ZeroQueueCapacity { src, dst } => {
                write!(f, "link {src}->{dst} queue capacity must be >= 1")
            }
            Violation::Disconnected { client, server } => {
                write!(f, "no path from client {client:?} to server {server:?}")
            }
        }
    }
}

/// Checks every type invariant plus connectivity for each client-server
/// pair. Violations are data, not failures.
pub fn validate_topology(t: &Topology) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for h in &t.hosts {
        if seen.insert(h.id.clone(), ()).is_some() {
            out.push(Violation::DuplicateHostId(h.id.clone()));
        }
        if h.role == Role::Relay && h.zone != Zone::Cloud {
            out.push(Violation::RelayNotInCloud(h.id.clone()));
        }
    }
    for l in &t.links {
        let key = (l.src.clone(), l.dst.clone());
        if t.host(&key.0).is_none() || t.host(&key.1).is_none() {
            out.push(Violation::UnknownEndpoint { src: l.src.clone(), dst: l.dst.clone() });
            continue;
        }
        if l.latency_ms <= 0.0 {
            out.push(Violation::NonPositiveLatency { src: l.src.clone(), dst: l.dst.clone() });
        }
        if l.bandwidth <= 0.0 {
            out.push(Violation::NonPositiveBandwidth { src: l.src.clone(), dst: l.dst.clone() });
        }
        if !(0.0..1.0).contains(&l.loss_rate) {
            out.push(Violation::InvalidLossRate {
                src: l.src.clone(),
                dst: l.dst.clone(),
                loss: l.loss_rate,
            });
        }
        if l.queue_capacity == 0 {
            out.push(Violation::ZeroQueueCapacity { src: l.src.clone(), dst: l.dst.clone() });
        }
    }
    let clients: Vec<_> = t.hosts.iter().filter(|h| h.role == Role::Client).collect();
    let servers: Vec<_> = t.hosts.iter().filter(|h| h.role == Role::Server).collect();
    for c in &clients {
        for s in &servers {
            if t.shortest_path(&c.id, &s.id).is_none() {
                out.push(Violation::Disconnected { client: c.id.clone(), server: s.id.clone() });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File schema. Human-editable TOML; durations in milliseconds, sizes in
// bytes, bandwidth in bytes per second.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyFile {
    pub hosts: Vec<Host>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency_ms: f64,
    pub bandwidth: f64,
    #[serde(default)]
    pub loss_rate: f64,
    pub queue_capacity: Option<usize>,
    /// Create both directions (the default) or only a->b.
    #[serde(default = "default_true")]
    pub symmetric: bool,
}

fn default_true() -> bool {
    true
}

impl TopologyFile {
    pub fn into_topology(self) -> Topology {
        let mut links = Vec::new();
        let zone_of = |id: &str| -> Zone {
            self.hosts
                .iter()
                .find(|h| h.id == id)
                .map(|h| h.zone)
                .unwrap_or(Zone::Internet)
        };
        for spec in &self.links {
            let intra_cloud =
                zone_of(&spec.a) == Zone::Cloud && zone_of(&spec.b) == Zone::Cloud;
            let queue = spec.queue_capacity.unwrap_or(if intra_cloud {
                DEFAULT_CLOUD_QUEUE
            } else {
                DEFAULT_INTERNET_QUEUE
            });
            links.push(Link {
                src: spec.a.clone(),
                dst: spec.b.clone(),
                latency_ms: spec.latency_ms,
                bandwidth: spec.bandwidth,
                loss_rate: spec.loss_rate,
                queue_capacity: queue,
            });
            if spec.symmetric {
                links.push(Link {
                    src: spec.b.clone(),
                    dst: spec.a.clone(),
                    latency_ms: spec.latency_ms,
                    bandwidth: spec.bandwidth,
                    loss_rate: spec.loss_rate,
                    queue_capacity: queue,
                });
            }
        }
        Topology::new(self.hosts, links)
    }
}

/// The evaluation topology from the relay experiments: residential client,
/// near relay, far relay, origin server. RTTs 32.7 / 215 / 26 ms per leg and
/// a slower direct Internet path.
pub fn reference_topology() -> Topology {
    let f = TopologyFile {
        hosts: vec![
            Host { id: "client".into(), role: Role::Client, zone: Zone::Internet },
            Host { id: "rc".into(), role: Role::Relay, zone: Zone::Cloud },
            Host { id: "rs".into(), role: Role::Relay, zone: Zone::Cloud },
            Host { id: "server".into(), role: Role::Server, zone: Zone::Internet },
        ],
        links: vec![
            LinkSpec {
                a: "client".into(),
                b: "rc".into(),
                latency_ms: 16.35,
                bandwidth: 125_000_000.0,
                loss_rate: 0.0,
                queue_capacity: Some(1_000_000),
                symmetric: true,
            },
            LinkSpec {
                a: "rc".into(),
                b: "rs".into(),
                latency_ms: 107.5,
                bandwidth: 1_250_000_000.0,
                loss_rate: 0.0,
                queue_capacity: Some(1_000_000),
                symmetric: true,
            },
            LinkSpec {
                a: "rs".into(),
                b: "server".into(),
                latency_ms: 13.0,
                bandwidth: 125_000_000.0,
                loss_rate: 0.0,
                queue_capacity: Some(1_000_000),
                symmetric: true,
            },
            // The BGP path; slower than the cloud route, per the premise
            // that the direct Internet path underperforms the overlay.
            LinkSpec {
                a: "client".into(),
                b: "server".into(),
                latency_ms: 145.0,
                bandwidth: 125_000_000.0,
                loss_rate: 0.0,
                queue_capacity: Some(1_000_000),
                symmetric: true,
            },
        ],
    };
    f.into_topology()
}

/// Hop list for the relay route on `reference_topology`.
pub fn reference_relay_path() -> Vec<String> {
    vec!["client".into(), "rc".into(), "rs".into(), "server".into()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Topology {
        reference_topology()
    }

    #[test]
    fn well_formed_chain_has_no_violations() {
        assert!(validate_topology(&chain()).is_empty());
    }

    #[test]
    fn loss_rate_one_is_flagged() {
        let mut t = chain();
        t.links[0].loss_rate = 1.0;
        let v = validate_topology(&t);
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::InvalidLossRate { loss, .. } if *loss == 1.0));
    }

    #[test]
    fn internet_relay_is_flagged() {
        let mut t = chain();
        let idx = t.host_index("rc").unwrap();
        t.hosts[idx].zone = Zone::Internet;
        let v = validate_topology(&t);
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::RelayNotInCloud(id) if id == "rc"));
    }

    #[test]
    fn rtt_is_symmetric() {
        let t = chain();
        for a in ["client", "rc", "rs", "server"] {
            for b in ["client", "rc", "rs", "server"] {
                if a == b {
                    continue;
                }
                let ab = t.rtt(a, b).unwrap();
                let ba = t.rtt(b, a).unwrap();
                assert!((ab - ba).abs() < 1e-12, "rtt({a},{b}) != rtt({b},{a})");
            }
        }
    }

    #[test]
    fn reference_relay_route_rtt_rounds_to_274() {
        let t = chain();
        let rtt = t.rtt_over_path(&reference_relay_path()).unwrap();
        assert!((rtt - 273.7).abs() < 1e-9);
        assert_eq!(rtt.round() as i64, 274);
    }

    #[test]
    fn reference_leg_rtts() {
        let t = chain();
        assert!((t.rtt("client", "rc").unwrap() - 32.7).abs() < 1e-9);
        assert!((t.rtt("rc", "rs").unwrap() - 215.0).abs() < 1e-9);
        assert!((t.rtt("rs", "server").unwrap() - 26.0).abs() < 1e-9);
    }

    #[test]
    fn toml_roundtrip() {
        let src = r#"
            [[hosts]]
            id = "a"
            role = "client"
            zone = "internet"

            [[hosts]]
            id = "b"
            role = "server"
            zone = "internet"

            [[links]]
            a = "a"
            b = "b"
            latency_ms = 50.0
            bandwidth = 125000000.0
        "#;
        let file: TopologyFile = toml::from_str(src).unwrap();
        let t = file.into_topology();
        assert_eq!(t.links.len(), 2);
        assert_eq!(t.links[0].queue_capacity, DEFAULT_INTERNET_QUEUE);
        assert!((t.rtt("a", "b").unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_sums() {
        let mut b = TimingBreakdown::default();
        b.push(TermLabel::Handshake, 100.0, true);
        b.push(TermLabel::Request, 100.0, true);
        b.push(TermLabel::SlowStartRound, 100.0, false);
        assert!((b.ttfb_ms() - 200.0).abs() < 1e-12);
        assert!((b.completion_ms() - 300.0).abs() < 1e-12);
    }
}
