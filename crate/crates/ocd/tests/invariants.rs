//! Property-based invariants across the timing model, the planner, the
//! wire preamble and the network lab.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use proptest::prelude::*;

use ocd::model::{FeatureSet, Host, Link, Role, Topology, Zone};
use ocd::netlab::scenario::{run_transfer, TransferSpec};
use ocd::planner::{estimate_midrelay_gain, plan_baseline, RttTable};
use ocd::relay::{decode_preamble, encode_preamble};
use ocd::timing::{timing, Scenario, Strategy};

/// client -- rc -- rs -- server with the given one-way leg latencies.
fn detour_topology(client_ms: f64, middle_ms: f64, server_ms: f64) -> (Topology, Vec<String>) {
    let host = |id: &str, role, zone| Host { id: id.into(), role, zone };
    let hosts = vec![
        host("client", Role::Client, Zone::Internet),
        host("rc", Role::Relay, Zone::Cloud),
        host("rs", Role::Relay, Zone::Cloud),
        host("server", Role::Server, Zone::Internet),
    ];
    let mut links = Vec::new();
    for (a, b, ms) in [
        ("client", "rc", client_ms),
        ("rc", "rs", middle_ms),
        ("rs", "server", server_ms),
    ] {
        for (src, dst) in [(a, b), (b, a)] {
            links.push(Link {
                src: src.into(),
                dst: dst.into(),
                latency_ms: ms,
                bandwidth: 125e6,
                loss_rate: 0.0,
                queue_capacity: 1024,
            });
        }
    }
    let path = ["client", "rc", "rs", "server"].map(String::from).to_vec();
    (Topology::new(hosts, links), path)
}

fn split_times(features: FeatureSet, legs: (f64, f64, f64)) -> (f64, f64) {
    let (topo, path) = detour_topology(legs.0, legs.1, legs.2);
    let mut scen = Scenario::new(topo, Strategy::Split, path, 1_000_000);
    scen.features = features;
    let b = timing(&scen).expect("connected route");
    (b.ttfb_ms(), b.completion_ms())
}

proptest! {
    /// Stretching the inner leg while it stays the longest leg never makes
    /// the split transfer faster.
    #[test]
    fn split_monotone_in_dominant_middle_leg(
        client_ms in 1.0f64..40.0,
        server_ms in 1.0f64..40.0,
        middle_ms in 40.0f64..150.0,
        stretch in 0.1f64..50.0,
        pied in any::<bool>(),
    ) {
        let features = if pied { FeatureSet::pied_piper() } else { FeatureSet::ocd_baseline() };
        let (ttfb_a, comp_a) = split_times(features, (client_ms, middle_ms, server_ms));
        let (ttfb_b, comp_b) = split_times(features, (client_ms, middle_ms + stretch, server_ms));
        prop_assert!(ttfb_b >= ttfb_a - 1e-9, "ttfb {ttfb_b} < {ttfb_a}");
        prop_assert!(comp_b >= comp_a - 1e-9, "completion {comp_b} < {comp_a}");
    }

    /// The preamble decodes back to exactly what was encoded, and no strict
    /// prefix ever decodes to anything.
    #[test]
    fn preamble_roundtrip(v6 in any::<bool>(), ip4 in any::<u32>(), ip6 in any::<u128>(), port in any::<u16>()) {
        let ip = if v6 {
            IpAddr::V6(Ipv6Addr::from(ip6))
        } else {
            IpAddr::V4(Ipv4Addr::from(ip4))
        };
        let addr = SocketAddr::new(ip, port);
        let wire = encode_preamble(addr);
        let (got, used) = decode_preamble(&wire).expect("valid frame").expect("complete frame");
        prop_assert_eq!(got, addr);
        prop_assert_eq!(used, wire.len());
        for cut in 0..wire.len() {
            prop_assert_eq!(decode_preamble(&wire[..cut]).expect("prefix is not an error"), None);
        }
    }

    /// Splitting a segment in half maximizes the middle-relay gain estimate.
    #[test]
    fn midrelay_gain_peaks_at_even_split(total in 1.0f64..500.0, cut in 0.01f64..0.99) {
        let uneven = estimate_midrelay_gain(total, total * cut, total * (1.0 - cut));
        let even = estimate_midrelay_gain(total, total / 2.0, total / 2.0);
        prop_assert!(uneven <= even + 1e-12, "gain {uneven} exceeds even-split gain {even}");
    }

    /// The baseline plan only depends on RTT ratios, not units.
    #[test]
    fn plan_baseline_is_scale_invariant(
        rtts in proptest::collection::vec(0.1f64..300.0, 8),
        scale in 0.01f64..100.0,
    ) {
        let relays: Vec<String> = (0..4).map(|i| format!("relay{i}")).collect();
        let mut base = RttTable::new();
        let mut scaled = RttTable::new();
        for (i, r) in relays.iter().enumerate() {
            base.insert("client", r, rtts[i]);
            base.insert("server", r, rtts[i + 4]);
            scaled.insert("client", r, rtts[i] * scale);
            scaled.insert("server", r, rtts[i + 4] * scale);
        }
        let a = plan_baseline("client", "server", &relays, &base).expect("plan");
        let b = plan_baseline("client", "server", &relays, &scaled).expect("plan");
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Same seed, same transfer: the lab is deterministic.
    #[test]
    fn lab_runs_are_deterministic(size in 1u64..200_000, seed in any::<u64>(), pied in any::<bool>()) {
        let (topo, path) = detour_topology(10.0, 60.0, 8.0);
        let features = if pied { FeatureSet::pied_piper() } else { FeatureSet::default() };
        let mut spec = TransferSpec::new(topo, Strategy::Split, features, path, size);
        spec.seed = seed;
        let a = run_transfer(&spec).expect("transfer completes");
        let b = run_transfer(&spec).expect("transfer completes");
        prop_assert_eq!(a.ttfb_ms, b.ttfb_ms);
        prop_assert_eq!(a.completion_ms, b.completion_ms);
        prop_assert_eq!(a.bytes, b.bytes);
        prop_assert!(a.digest_ok && b.digest_ok);
    }
}
