//! Closed-form timing models: the ideal pipe, end-to-end TCP, the unsplit
//! relay route, and the split relay with each acceleration applied as an
//! explicit delta. Completion uses the bottleneck-leg rule: legs stream
//! concurrently and the slowest leg's remaining slow-start rounds dominate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    FeatureSet, TermLabel, TimingBreakdown, Topology, TransportParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ideal,
    E2e,
    NosplitRelay,
    Split,
}

/// Default thread fork cost on the relay data path, milliseconds.
pub const DEFAULT_FORK_DELAY_MS: f64 = 0.012;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Topology,
    pub strategy: Strategy,
    pub features: FeatureSet,
    /// Explicit end-to-end hop list; for split/nosplit it must pass through
    /// the relays in order.
    pub path: Vec<String>,
    /// Direct path used by the e2e strategy (BGP route); defaults to `path`.
    pub e2e_path: Vec<String>,
    /// Parameters on the outer (Internet-facing) legs.
    pub external_params: TransportParams,
    /// Parameters on intra-cloud legs when turbo_start is active.
    pub intra_cloud_params: TransportParams,
    pub file_size: u64,
    pub fork_delay_ms: f64,
    pub preamble_delay_ms: f64,
    /// Residual client/server-side delays outside our control; default 0.
    pub residual_client_ms: f64,
    pub residual_server_ms: f64,
}

impl Scenario {
    pub fn new(topology: Topology, strategy: Strategy, path: Vec<String>, file_size: u64) -> Self {
        Scenario {
            topology,
            strategy,
            features: FeatureSet::default(),
            e2e_path: path.clone(),
            path,
            external_params: TransportParams::default(),
            intra_cloud_params: TransportParams::turbo(),
            file_size,
            fork_delay_ms: DEFAULT_FORK_DELAY_MS,
            preamble_delay_ms: 0.0,
            residual_client_ms: 0.0,
            residual_server_ms: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TimingError {
    #[error("path {0:?} is not connected in the topology")]
    Disconnected(Vec<String>),
    #[error("split strategy requires at least one relay on the path")]
    NoRelays,
    #[error("file_size must be >= 1")]
    EmptyFile,
}

/// Smallest number of slow-start rounds that move `file_size` bytes when the
/// window starts at `init_cwnd` segments and doubles each round.
pub fn slow_start_rounds(file_size: u64, mss: u32, init_cwnd: u32) -> u32 {
    assert!(file_size > 0 && mss > 0 && init_cwnd > 0);
    let per_round_base = mss as u128 * init_cwnd as u128;
    let mut r = 1u32;
    // mss * cwnd * (2^r - 1) >= file_size
    while per_round_base.saturating_mul((1u128 << r) - 1) < file_size as u128 {
        r += 1;
    }
    r
}

/// Slow-start rounds with the per-round in-flight window capped at rwnd.
pub fn slow_start_rounds_capped(file_size: u64, params: &TransportParams) -> u32 {
    let mss = params.mss as u64;
    let cap = params.rwnd.max(mss);
    let mut sent = 0u64;
    let mut window = (params.init_cwnd as u64) * mss;
    let mut r = 0u32;
    while sent < file_size {
        sent += window.min(cap);
        window = window.saturating_mul(2);
        r += 1;
    }
    r
}

fn serialization_ms(file_size: u64, topo: &Topology, path: &[String]) -> Result<f64, TimingError> {
    let bw = topo
        .path_bottleneck_bandwidth(path)
        .ok_or_else(|| TimingError::Disconnected(path.to_vec()))?;
    Ok(file_size as f64 / bw * 1000.0)
}

/// Wire time of `bytes` of payload cut into `mss`-sized segments, each
/// carrying a 40-byte header.
fn wire_ms_at(bytes: u64, mss: u32, bw: f64) -> f64 {
    let segs = bytes.div_ceil(mss as u64).max(1);
    (bytes + segs * 40) as f64 / bw * 1000.0
}

fn path_bw(topo: &Topology, path: &[String]) -> Result<f64, TimingError> {
    topo.path_bottleneck_bandwidth(path)
        .ok_or_else(|| TimingError::Disconnected(path.to_vec()))
}

/// Slow-start schedule on a leg of round-trip `rtt_ms` draining through a
/// `bw` bottleneck. Returns the number of idle round-trip gaps plus the
/// payload whose wire time is visible in the completion.
///
/// While windows are small, each round's serialization hides inside its
/// round-trip gap and only the final round's tail shows up. Once a window
/// takes a full round trip to serialize, the bottleneck never drains again
/// and everything from that round onward is one continuous wire run.
fn tail_schedule(file_size: u64, params: &TransportParams, rtt_ms: f64, bw: f64) -> (u32, u64) {
    let mss = params.mss as u64;
    let cap = params.rwnd.max(mss);
    let mut remaining = file_size;
    let mut window = (params.init_cwnd as u64) * mss;
    let mut gaps = 0u32;
    loop {
        let send = window.min(cap).min(remaining);
        if remaining <= send || wire_ms_at(send, params.mss, bw) >= rtt_ms {
            return (gaps, remaining);
        }
        remaining -= send;
        gaps += 1;
        window = window.saturating_mul(2);
    }
}

fn rtt_of(topo: &Topology, path: &[String]) -> Result<f64, TimingError> {
    topo.rtt_over_path(path)
        .ok_or_else(|| TimingError::Disconnected(path.to_vec()))
}

/// Protocol-free ideal pipe: the request directly triggers the transmission
/// of all response bytes. TTFB is one RTT, the lowest possible.
pub fn ideal_timing(s: &Scenario) -> Result<TimingBreakdown, TimingError> {
    if s.file_size == 0 {
        return Err(TimingError::EmptyFile);
    }
    let rtt = rtt_of(&s.topology, &s.path)?;
    let ser = serialization_ms(s.file_size, &s.topology, &s.path)?;
    let mut b = TimingBreakdown::default();
    b.push(TermLabel::Request, rtt, true);
    b.push(TermLabel::Serialization, ser, false);
    Ok(b)
}

fn rounds_terms(b: &mut TimingBreakdown, rounds: u32, rtt: f64) {
    for _ in 1..rounds {
        b.push(TermLabel::SlowStartRound, rtt, false);
    }
}

/// End-to-end TCP: one RTT of connection establishment, one RTT for the
/// request and first byte, then slow-start seriality.
pub fn e2e_timing(s: &Scenario) -> Result<TimingBreakdown, TimingError> {
    if s.file_size == 0 {
        return Err(TimingError::EmptyFile);
    }
    let path = &s.e2e_path;
    let rtt = rtt_of(&s.topology, path)?;
    let bw = path_bw(&s.topology, path)?;
    let (gaps, tail) = tail_schedule(s.file_size, &s.external_params, rtt, bw);
    let ser = wire_ms_at(tail, s.external_params.mss, bw);
    let mut b = TimingBreakdown::default();
    b.push(TermLabel::Handshake, rtt, true);
    b.push(TermLabel::Request, rtt, true);
    rounds_terms(&mut b, gaps + 1, rtt);
    b.push(TermLabel::Serialization, ser, false);
    Ok(b)
}

/// Relay route without splitting: same handshake/slow-start shape as e2e,
/// over the relay path's RTT.
pub fn nosplit_timing(s: &Scenario) -> Result<TimingBreakdown, TimingError> {
    if s.file_size == 0 {
        return Err(TimingError::EmptyFile);
    }
    let rtt = rtt_of(&s.topology, &s.path)?;
    let bw = path_bw(&s.topology, &s.path)?;
    let (gaps, tail) = tail_schedule(s.file_size, &s.external_params, rtt, bw);
    let ser = wire_ms_at(tail, s.external_params.mss, bw);
    let mut b = TimingBreakdown::default();
    b.push(TermLabel::Handshake, rtt, true);
    b.push(TermLabel::Request, rtt, true);
    rounds_terms(&mut b, gaps + 1, rtt);
    b.push(TermLabel::Serialization, ser, false);
    Ok(b)
}

/// One leg of a split route.
#[derive(Debug, Clone)]
pub struct Leg {
    pub hops: Vec<String>,
    pub rtt_ms: f64,
    pub intra_cloud: bool,
}

/// Cuts the scenario path at every relay host.
pub fn split_legs(topo: &Topology, path: &[String]) -> Result<Vec<Leg>, TimingError> {
    use crate::model::{Role, Zone};
    let mut cuts = vec![0usize];
    for (i, id) in path.iter().enumerate() {
        if i > 0 && i + 1 < path.len() {
            if let Some(h) = topo.host(id) {
                if h.role == Role::Relay {
                    cuts.push(i);
                }
            }
        }
    }
    cuts.push(path.len() - 1);
    if cuts.len() < 4 {
        return Err(TimingError::NoRelays);
    }
    let mut legs = Vec::new();
    for w in cuts.windows(2) {
        let hops: Vec<String> = path[w[0]..=w[1]].to_vec();
        let rtt_ms = topo
            .rtt_over_path(&hops)
            .ok_or_else(|| TimingError::Disconnected(hops.clone()))?;
        let intra_cloud = hops.iter().all(|id| {
            topo.host(id).map(|h| h.zone == Zone::Cloud).unwrap_or(false)
        });
        legs.push(Leg { hops, rtt_ms, intra_cloud });
    }
    Ok(legs)
}

/// Split relay timing with the four accelerations applied as deltas:
///  - base: sequential per-leg handshakes plus a fork at each relay;
///  - early_syn overlaps the outer handshakes with the inner ones,
///    removing RTT(client,rc) + RTT(rs,server);
///  - thread_pool removes the forks;
///  - connection_pool pre-pays the inner handshake, but the request still
///    has to reach the first relay, so it removes RTT(rc,rs) - RTT(client,rc);
///  - turbo_start sends the intra-cloud leg with its large initial window.
pub fn split_timing(s: &Scenario) -> Result<TimingBreakdown, TimingError> {
    if s.file_size == 0 {
        return Err(TimingError::EmptyFile);
    }
    let legs = split_legs(&s.topology, &s.path)?;
    let f = s.features;
    let n_relays = legs.len() - 1;
    let first = &legs[0];
    let last = &legs[legs.len() - 1];
    // The pooled leg is the longest relay-to-relay leg.
    let inner_idx = (1..legs.len() - 1)
        .max_by(|&a, &b| legs[a].rtt_ms.total_cmp(&legs[b].rtt_ms))
        .expect("split route has an inner leg");

    let mut b = TimingBreakdown::default();
    if s.residual_client_ms > 0.0 {
        b.push(TermLabel::Handshake, s.residual_client_ms, true);
    }
    // Outer handshake, then the request's forward trip on the first leg.
    b.push(TermLabel::Handshake, first.rtt_ms, true);
    b.push(TermLabel::Request, 0.5 * first.rtt_ms, true);
    if !f.thread_pool {
        for _ in 0..n_relays {
            b.push(TermLabel::Fork, s.fork_delay_ms, true);
        }
    }
    // Per-leg handshakes downstream of the first relay, as signed residuals
    // after feature overlap.
    for (i, leg) in legs.iter().enumerate().skip(1) {
        let mut wait = leg.rtt_ms;
        if f.early_syn {
            // Outer handshakes overlap the inner ones.
            if i == legs.len() - 1 {
                wait -= last.rtt_ms;
            } else if i == inner_idx {
                wait -= first.rtt_ms;
            }
        } else if i == inner_idx && f.connection_pool && !f.early_syn {
            wait -= legs[inner_idx].rtt_ms - first.rtt_ms;
        }
        if f.early_syn && i == inner_idx && f.connection_pool {
            // Handshake fully pre-paid; the request-at-relay bound already
            // sits in the first-leg terms.
            wait = 0.0;
        }
        b.push(TermLabel::RelayHandshake, wait, true);
        if s.preamble_delay_ms > 0.0 && i > 0 {
            b.push(TermLabel::Preamble, s.preamble_delay_ms, true);
        }
        b.push(TermLabel::Request, 0.5 * leg.rtt_ms, true);
    }
    if s.residual_server_ms > 0.0 {
        b.push(TermLabel::Handshake, s.residual_server_ms, true);
    }
    // First byte travels back over the whole route.
    let total_one_way: f64 = legs.iter().map(|l| 0.5 * l.rtt_ms).sum();
    b.push(TermLabel::Request, total_one_way, true);

    // Remaining slow-start rounds: legs stream concurrently, the bottleneck
    // leg dominates. Tails always drain through the whole route's slowest
    // link, whichever leg gates the round schedule.
    let bw = path_bw(&s.topology, &s.path)?;
    let mut worst = 0.0f64;
    let mut worst_gaps = 0;
    let mut worst_rtt = 0.0;
    let mut worst_ser = 0.0;
    for leg in &legs {
        let params = if leg.intra_cloud && f.turbo_start {
            &s.intra_cloud_params
        } else {
            &s.external_params
        };
        let (gaps, tail) = tail_schedule(s.file_size, params, leg.rtt_ms, bw);
        let ser = wire_ms_at(tail, params.mss, bw);
        let cost = gaps as f64 * leg.rtt_ms + ser;
        if cost > worst {
            worst = cost;
            worst_gaps = gaps;
            worst_rtt = leg.rtt_ms;
            worst_ser = ser;
        }
    }
    rounds_terms(&mut b, worst_gaps + 1, worst_rtt);
    b.push(TermLabel::Serialization, worst_ser, false);
    Ok(b)
}

/// Dispatch on the scenario strategy.
pub fn timing(s: &Scenario) -> Result<TimingBreakdown, TimingError> {
    match s.strategy {
        Strategy::Ideal => ideal_timing(s),
        Strategy::E2e => e2e_timing(s),
        Strategy::NosplitRelay => nosplit_timing(s),
        Strategy::Split => split_timing(s),
    }
}

/// Maximum steady-state throughput of a receive-window-limited flow.
pub fn rwnd_limited_throughput(rwnd_bytes: u64, rtt_ms: f64) -> f64 {
    assert!(rwnd_bytes > 0 && rtt_ms > 0.0);
    rwnd_bytes as f64 / (rtt_ms / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_relay_path, reference_topology};

    /// Brute-force oracle: simulate doubling windows round by round.
    fn rounds_oracle(file_size: u64, mss: u64, cwnd: u64) -> u32 {
        let mut sent = 0u64;
        let mut window = cwnd * mss;
        let mut rounds = 0;
        while sent < file_size {
            sent += window;
            window *= 2;
            rounds += 1;
        }
        rounds
    }

    #[test]
    fn slow_start_round_counts() {
        assert_eq!(slow_start_rounds(10_000, 1460, 10), 1);
        assert_eq!(slow_start_rounds(1460, 1460, 1), 1);
        assert_eq!(slow_start_rounds(100_000, 1460, 10), 3);
        for &size in &[1u64, 1460, 14_600, 14_601, 100_000, 1_000_000, 10_000_000] {
            for &cwnd in &[1u64, 2, 10, 1000] {
                assert_eq!(
                    slow_start_rounds(size, 1460, cwnd as u32),
                    rounds_oracle(size, 1460, cwnd),
                    "size={size} cwnd={cwnd}"
                );
            }
        }
    }

    fn reference_scenario(strategy: Strategy, size: u64) -> Scenario {
        let mut s = Scenario::new(reference_topology(), strategy, reference_relay_path(), size);
        s.e2e_path = vec!["client".into(), "server".into()];
        s
    }

    #[test]
    fn ideal_ttfb_is_one_rtt() {
        let s = reference_scenario(Strategy::Ideal, 1);
        let b = ideal_timing(&s).unwrap();
        assert!((b.ttfb_ms() - 273.7).abs() < 1e-9);
    }

    #[test]
    fn ideal_zero_payload_on_100ms_rtt() {
        let mut t = reference_topology();
        // Make every link effectively infinite to isolate the RTT.
        for l in &mut t.links {
            l.bandwidth = 1e18;
        }
        let mut s = Scenario::new(
            t,
            Strategy::Ideal,
            vec!["client".into(), "server".into()],
            1,
        );
        s.topology.links.iter_mut().for_each(|l| l.latency_ms = 50.0);
        let b = ideal_timing(&s).unwrap();
        assert!((b.ttfb_ms() - 100.0).abs() < 1e-9);
        assert!((b.completion_ms() - b.ttfb_ms()).abs() < 1e-6);
    }

    #[test]
    fn ideal_completion_serialization_oracle() {
        // 10 MB at 100 MB/s bottleneck, RTT 100 ms -> completion 200 ms.
        let file = crate::model::TopologyFile {
            hosts: vec![
                crate::model::Host {
                    id: "a".into(),
                    role: crate::model::Role::Client,
                    zone: crate::model::Zone::Internet,
                },
                crate::model::Host {
                    id: "b".into(),
                    role: crate::model::Role::Server,
                    zone: crate::model::Zone::Internet,
                },
            ],
            links: vec![crate::model::LinkSpec {
                a: "a".into(),
                b: "b".into(),
                latency_ms: 50.0,
                bandwidth: 100_000_000.0,
                loss_rate: 0.0,
                queue_capacity: None,
                symmetric: true,
            }],
        };
        let t = file.into_topology();
        let s = Scenario::new(t, Strategy::Ideal, vec!["a".into(), "b".into()], 10_000_000);
        let b = ideal_timing(&s).unwrap();
        let oracle_ser_ms = 10_000_000.0 / 100_000_000.0 * 1000.0;
        assert!((b.completion_ms() - (100.0 + oracle_ser_ms)).abs() < 1e-9);
    }

    #[test]
    fn e2e_ttfb_is_two_rtts() {
        let s = reference_scenario(Strategy::E2e, 10_000);
        let b = e2e_timing(&s).unwrap();
        assert!((b.ttfb_ms() - 2.0 * 290.0).abs() < 1e-9);
        // Flat relay-route path as e2e: 2 x 273.7.
        let mut s2 = reference_scenario(Strategy::E2e, 10_000);
        s2.e2e_path = reference_relay_path();
        let b2 = e2e_timing(&s2).unwrap();
        assert!((b2.ttfb_ms() - 547.4).abs() < 1e-9);
    }

    #[test]
    fn e2e_completion_adds_round_trips() {
        // RTT 100 ms, 100 KB, cwnd 10 -> 3 rounds -> completion 400 ms + ser.
        let file = crate::model::TopologyFile {
            hosts: vec![
                crate::model::Host {
                    id: "a".into(),
                    role: crate::model::Role::Client,
                    zone: crate::model::Zone::Internet,
                },
                crate::model::Host {
                    id: "b".into(),
                    role: crate::model::Role::Server,
                    zone: crate::model::Zone::Internet,
                },
            ],
            links: vec![crate::model::LinkSpec {
                a: "a".into(),
                b: "b".into(),
                latency_ms: 50.0,
                bandwidth: 1e12,
                loss_rate: 0.0,
                queue_capacity: None,
                symmetric: true,
            }],
        };
        let t = file.into_topology();
        let s = Scenario::new(t, Strategy::E2e, vec!["a".into(), "b".into()], 100_000);
        let b = e2e_timing(&s).unwrap();
        // Rounds move 14600, 29200, then the 56200-byte remainder; only the
        // remainder's wire time is visible past the last round trip.
        let tail = 56_200.0 + 39.0 * 40.0;
        let ser = tail / 1e12 * 1000.0;
        assert!((b.completion_ms() - (400.0 + ser)).abs() < 1e-9);
    }

    #[test]
    fn early_syn_delta_is_outer_rtts() {
        let mut s = reference_scenario(Strategy::Split, 10_000);
        s.features.thread_pool = true;
        let off = split_timing(&s).unwrap().ttfb_ms();
        s.features.early_syn = true;
        let on = split_timing(&s).unwrap().ttfb_ms();
        assert!((off - on - 58.7).abs() < 1e-9);
    }

    #[test]
    fn connection_pool_delta_is_inner_minus_first() {
        let mut s = reference_scenario(Strategy::Split, 10_000);
        s.features.thread_pool = true;
        s.features.early_syn = true;
        let off = split_timing(&s).unwrap().ttfb_ms();
        s.features.connection_pool = true;
        let on = split_timing(&s).unwrap().ttfb_ms();
        assert!((off - on - 182.3).abs() < 1e-9);
        assert_eq!((off - on).round() as i64, 182);
    }

    #[test]
    fn turbo_start_is_free_for_single_burst_files() {
        let mut s = reference_scenario(Strategy::Split, 10_000);
        s.features = FeatureSet::pied_piper();
        s.features.turbo_start = false;
        let off = split_timing(&s).unwrap().completion_ms();
        s.features.turbo_start = true;
        let on = split_timing(&s).unwrap().completion_ms();
        assert!((off - on).abs() < 1e-9);
    }

    #[test]
    fn full_feature_ttfb_matches_delta_sum() {
        let mut s = reference_scenario(Strategy::Split, 10_000);
        let base = split_timing(&s).unwrap().ttfb_ms();
        s.features = FeatureSet::pied_piper();
        let pp = split_timing(&s).unwrap().ttfb_ms();
        let expected = base - 58.7 - 182.3 - 2.0 * DEFAULT_FORK_DELAY_MS;
        assert!((pp - expected).abs() < 1e-9);
        // Absolute shape: 2*Rc + Rm + Rs.
        assert!((pp - (2.0 * 32.7 + 215.0 + 26.0)).abs() < 1e-9);
    }

    #[test]
    fn rwnd_throughput_values() {
        let t = rwnd_limited_throughput(65_536, 273.7);
        assert!((t - 65_536.0 / 0.2737).abs() < 1.0);
        assert!((t / 1e3 - 239.0).abs() < 1.0); // ~239 KB/s
        let t2 = rwnd_limited_throughput(65_536, 32.7);
        assert!((t2 / 1e6 - 2.0).abs() < 0.05); // ~2 MB/s
        let t3 = rwnd_limited_throughput(1460, 1000.0);
        assert!((t3 - 1460.0).abs() < 1e-9);
    }

    #[test]
    fn breakdown_is_compositional() {
        for (_, features) in FeatureSet::ladder() {
            let mut s = reference_scenario(Strategy::Split, 1_000_000);
            s.features = features;
            let b = split_timing(&s).unwrap();
            let ttfb_sum: f64 = b.terms.iter().filter(|t| t.in_ttfb).map(|t| t.millis).sum();
            assert!((ttfb_sum - b.ttfb_ms()).abs() < 1e-12);
            assert!(b.ttfb_ms() <= b.completion_ms() + 1e-12);
        }
    }

    #[test]
    fn small_file_split_may_regress_but_large_wins() {
        // Expected dominance: full-feature split beats e2e at >= 100 KB;
        // featureless split may lose at 10 KB.
        for &size in &[100_000u64, 1_000_000, 10_000_000] {
            let mut s = reference_scenario(Strategy::Split, size);
            s.features = FeatureSet::pied_piper();
            let split = split_timing(&s).unwrap().completion_ms();
            let e2e = e2e_timing(&s).unwrap().completion_ms();
            assert!(split < e2e, "size={size}: {split} !< {e2e}");
        }
    }
}
