//! Acceptance gate: each check prints one ACCEPTANCE PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture` to see every line.

use ocd::bench::{rtt_sweep, spearman, EstimatorKind};
use ocd::model::{
    reference_relay_path, reference_topology, FeatureSet, Topology, TransportParams,
};
use ocd::netlab::scenario::{
    install_relay_chain, run_fairness, run_transfer, FairnessFlow, FairnessSpec, TransferSpec,
    SERVER_PORT, WARMUP_NS,
};
use ocd::netlab::{expected_digest, FlowState, Sim};
use ocd::relay::preamble::{decode_preamble, encode_preamble, PreambleError};
use ocd::timing::{timing, Scenario, Strategy};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) -> bool {
    println!(
        "ACCEPTANCE {n:2} {name}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn analytic(features: FeatureSet, size: u64) -> f64 {
    let mut s = Scenario::new(
        reference_topology(),
        Strategy::Split,
        reference_relay_path(),
        size,
    );
    s.features = features;
    timing(&s).unwrap().ttfb_ms()
}

fn lab(strategy: Strategy, features: FeatureSet, size: u64) -> (f64, f64) {
    let spec = TransferSpec::reference(strategy, features, size);
    let r = run_transfer(&spec).unwrap();
    assert_eq!(r.state, FlowState::Done);
    assert!(r.digest_ok);
    (r.ttfb_ms, r.completion_ms)
}

fn tp() -> FeatureSet {
    FeatureSet { thread_pool: true, ..FeatureSet::default() }
}

fn tp_es() -> FeatureSet {
    FeatureSet { thread_pool: true, early_syn: true, ..FeatureSet::default() }
}

fn tp_es_cp() -> FeatureSet {
    FeatureSet {
        thread_pool: true,
        early_syn: true,
        connection_pool: true,
        ..FeatureSet::default()
    }
}

#[test]
fn c01_early_syn_delta() {
    let delta = analytic(tp(), 10_000) - analytic(tp_es(), 10_000);
    let exact = (delta - 58.7).abs() < 1e-9;
    let lab_delta = lab(Strategy::Split, tp(), 10_000).0 - lab(Strategy::Split, tp_es(), 10_000).0;
    let lab_ok = (lab_delta - 58.7).abs() < 1.0;
    let ok = verdict(
        1,
        "early-syn delta",
        exact && lab_ok,
        &format!("analytic {delta:.4} ms, lab {lab_delta:.4} ms vs 58.7"),
    );
    assert!(ok);
}

#[test]
fn c02_connection_pool_delta() {
    let delta = analytic(tp_es(), 10_000) - analytic(tp_es_cp(), 10_000);
    // The inner handshake minus the already-paid first leg: 215 - 32.7,
    // quoted rounded to whole milliseconds.
    let exact = delta.round() == 182.0 && (delta - 182.0).abs() <= 0.5;
    let lab_delta =
        lab(Strategy::Split, tp_es(), 10_000).0 - lab(Strategy::Split, tp_es_cp(), 10_000).0;
    let lab_ok = (lab_delta - 182.0).abs() < 2.0;
    let ok = verdict(
        2,
        "connection-pool delta",
        exact && lab_ok,
        &format!("analytic {delta:.4} ms, lab {lab_delta:.4} ms vs 182"),
    );
    assert!(ok);
}

#[test]
fn c03_single_burst_small_file() {
    let (ttfb, completion) = lab(Strategy::Split, FeatureSet::pied_piper(), 10_000);
    // 7 segments of 1460 B payload + 40 B header over the slowest leg.
    let bound_ms = 7.0 * 1500.0 / 125e6 * 1e3;
    let tail = completion - ttfb;
    let ok = verdict(
        3,
        "single-burst small file",
        tail <= bound_ms,
        &format!("completion - ttfb = {:.4} ms, bound {:.4} ms", tail, bound_ms),
    );
    assert!(ok);
}

#[test]
fn c04_turbo_start_and_ladder() {
    // Part 1: the quoted lower bound on turbo-start's completion savings.
    let mut turbo_ok = true;
    let mut turbo_detail = String::new();
    for size in [1_000_000u64, 10_000_000] {
        let base = lab(Strategy::Split, tp_es_cp(), size).1;
        let turbo = lab(Strategy::Split, FeatureSet::pied_piper(), size).1;
        let rounds = ocd::timing::slow_start_rounds(size, 1460, 10);
        let required = (rounds - 1) as f64 * 215.0;
        let saved = base - turbo;
        if saved < required {
            turbo_ok = false;
        }
        turbo_detail.push_str(&format!(
            "[{} B: saved {:.1} ms, required {:.1} ms] ",
            size, saved, required
        ));
    }
    // Part 2: median-completion ordering along the configuration ladder.
    let mut ladder_ok = true;
    let mut ladder_detail = String::new();
    for size in [100_000u64, 1_000_000, 10_000_000] {
        let mut seq = vec![
            ("e2e", lab(Strategy::E2e, FeatureSet::default(), size).1),
            ("nosplit", lab(Strategy::NosplitRelay, FeatureSet::default(), size).1),
        ];
        for (label, f) in FeatureSet::ladder() {
            seq.push((label, lab(Strategy::Split, f, size).1));
        }
        // e2e must be strictly worst; the rest non-increasing.
        if seq[0].1 <= seq[1].1 {
            // strict
        } else {
            ladder_ok = false;
        }
        for w in seq[1..].windows(2) {
            if w[0].1 + 1e-6 < w[1].1 {
                ladder_ok = false;
                ladder_detail
                    .push_str(&format!("[{size} B: {} < {}] ", w[0].0, w[1].0));
            }
        }
    }
    let ok = verdict(
        4,
        "turbo-start bound and ladder ordering",
        turbo_ok && ladder_ok,
        &format!("turbo: {turbo_detail}ladder: {}", if ladder_detail.is_empty() { "ordered" } else { &ladder_detail }),
    );
    assert!(ok);
}

#[test]
fn c05_small_file_regression_tolerance() {
    let e2e = lab(Strategy::E2e, FeatureSet::default(), 10_000).1;
    let base_split = lab(Strategy::Split, FeatureSet::ocd_baseline(), 10_000).1;
    let pp = lab(Strategy::Split, FeatureSet::pied_piper(), 10_000).1;
    // A bare split is allowed to regress; full Pied Piper must stay within 5%.
    let ok = verdict(
        5,
        "small-file regression tolerance",
        pp <= e2e * 1.05,
        &format!("e2e {e2e:.1} ms, bare split {base_split:.1} ms (regression permitted), pied piper {pp:.1} ms"),
    );
    assert!(ok);
}

#[test]
fn c06_rwnd_limited_client() {
    let rwnd = 64 * 1024u64;
    let size = 10_000_000u64;
    let mut spec =
        TransferSpec::reference(Strategy::NosplitRelay, FeatureSet::default(), size);
    spec.client_params.rwnd = rwnd;
    spec.client_params.recv_buffer = rwnd;
    let nosplit = run_transfer(&spec).unwrap();
    assert_eq!(nosplit.state, FlowState::Done);
    let measured = size as f64 / ((nosplit.completion_ms - nosplit.ttfb_ms) / 1e3);
    let ceiling = ocd::timing::rwnd_limited_throughput(rwnd, 273.7);
    let tp_ok = (measured - ceiling).abs() / ceiling < 0.10;

    let mut split =
        TransferSpec::reference(Strategy::Split, FeatureSet::pied_piper(), size);
    split.client_params.rwnd = rwnd;
    split.client_params.recv_buffer = rwnd;
    let split = run_transfer(&split).unwrap();
    assert_eq!(split.state, FlowState::Done);
    let gain = nosplit.completion_ms / split.completion_ms;
    let ok = verdict(
        6,
        "rwnd-limited client",
        tp_ok && gain > 4.0,
        &format!(
            "throughput {:.0} B/s vs ceiling {:.0} B/s; split gain {:.2}x",
            measured, ceiling, gain
        ),
    );
    assert!(ok);
}

fn fairness_topology() -> Topology {
    use ocd::model::{Host, LinkSpec, Role, TopologyFile, Zone};
    let host = |id: &str, role, zone| Host { id: id.into(), role, zone };
    let link = |a: &str, b: &str, lat: f64, bw: f64, q: usize| LinkSpec {
        a: a.into(),
        b: b.into(),
        latency_ms: lat,
        bandwidth: bw,
        loss_rate: 0.0,
        queue_capacity: Some(q),
        symmetric: true,
    };
    TopologyFile {
        hosts: vec![
            host("near", Role::Client, Zone::Internet),
            host("far", Role::Client, Zone::Internet),
            host("rc", Role::Relay, Zone::Cloud),
            host("rs", Role::Relay, Zone::Cloud),
            host("server", Role::Server, Zone::Internet),
        ],
        links: vec![
            link("near", "rs", 10.0, 125e6, 1024),
            link("far", "rc", 16.35, 125e6, 1024),
            link("rc", "rs", 107.5, 1.25e9, 1024),
            link("far", "rs", 123.85, 125e6, 1024),
            // The contested bottleneck: queue sized near the short flow's BDP.
            link("rs", "server", 13.0, 1_562_500.0, 64),
        ],
    }
    .into_topology()
}

#[test]
fn c07_fairness_restoration() {
    let topo = fairness_topology();
    let near = FairnessFlow {
        client: "near".into(),
        server: "server".into(),
        strategy: Strategy::E2e,
        path: vec![],
        file_size: 20_000_000,
        start_ms: 0.0,
    };
    let far_unsplit = FairnessFlow {
        client: "far".into(),
        server: "server".into(),
        strategy: Strategy::E2e,
        path: vec![],
        file_size: 20_000_000,
        start_ms: 0.0,
    };
    let far_split = FairnessFlow {
        strategy: Strategy::Split,
        path: ["far", "rc", "rs", "server"].iter().map(|s| s.to_string()).collect(),
        ..far_unsplit.clone()
    };
    let spec = |flows: Vec<FairnessFlow>, features: FeatureSet| FairnessSpec {
        topology: topo.clone(),
        flows,
        features,
        seed: 7,
        window_ms: 1000.0,
        jitter_us: 50,
        external_params: TransportParams::default(),
        intra_cloud_params: TransportParams::turbo(),
    };
    let unsplit = run_fairness(&spec(
        vec![near.clone(), far_unsplit],
        FeatureSet::default(),
    ))
    .unwrap();
    let u = unsplit.mean_shares();
    let pied = run_fairness(&spec(vec![near, far_split], FeatureSet::pied_piper())).unwrap();
    let p = pied.mean_shares();
    let unsplit_shape = u[1] < u[0];
    let restored = (0.35..=0.65).contains(&p[0]) && (0.35..=0.65).contains(&p[1]);
    let ok = verdict(
        7,
        "fairness restoration",
        unsplit_shape && restored,
        &format!(
            "unsplit shares near/far {:.3}/{:.3}; pied piper {:.3}/{:.3}",
            u[0], u[1], p[0], p[1]
        ),
    );
    assert!(ok);
}

#[test]
fn c08_oracle_equivalence_grid() {
    let scales = [0.5f64, 1.0, 1.5, 2.0];
    let sizes = [10_000u64, 100_000, 1_000_000, 10_000_000];
    let cwnds = [10u32, 44];
    let mut worst: (f64, String) = (0.0, String::new());
    let mut ok = true;
    for &scale in &scales {
        let mut topo = reference_topology();
        for l in &mut topo.links {
            l.latency_ms *= scale;
        }
        for &size in &sizes {
            for &cwnd in &cwnds {
                for (label, features) in FeatureSet::ladder() {
                    let mut spec = TransferSpec::new(
                        topo.clone(),
                        Strategy::Split,
                        features,
                        reference_relay_path(),
                        size,
                    );
                    spec.client_params.init_cwnd = cwnd;
                    spec.server_params.init_cwnd = cwnd;
                    spec.external_params.init_cwnd = cwnd;
                    let got = run_transfer(&spec).unwrap();
                    assert_eq!(got.state, FlowState::Done, "{label} {size} {cwnd} {scale}");
                    let mut scen = Scenario::new(
                        topo.clone(),
                        Strategy::Split,
                        reference_relay_path(),
                        size,
                    );
                    scen.features = features;
                    scen.external_params.init_cwnd = cwnd;
                    let want = timing(&scen).unwrap().completion_ms();
                    // One full-size segment over the slowest leg, plus 1 ms.
                    let tol = 1500.0 / 125e6 * 1e3 + 1.0;
                    let err = (got.completion_ms - want).abs();
                    if err > worst.0 {
                        worst = (err, format!("{label} size {size} cwnd {cwnd} scale {scale}"));
                    }
                    if err > tol {
                        ok = false;
                    }
                }
            }
        }
    }
    let ok = verdict(
        8,
        "analytic vs lab completion grid",
        ok,
        &format!("worst |err| {:.4} ms at {}", worst.0, worst.1),
    );
    assert!(ok);
}

#[test]
fn c09_stream_integrity_randomized() {
    let total = 1000usize;
    let workers = 8usize;
    let failures = std::sync::Mutex::new(Vec::<String>::new());
    std::thread::scope(|s| {
        for w in 0..workers {
            let failures = &failures;
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(900 + w as u64);
                let topo = reference_topology();
                for i in (w..total).step_by(workers) {
                    let size = (10f64.powf(rng.gen_range(0.0..7.0)) as u64).max(1);
                    let features = FeatureSet {
                        early_syn: rng.gen_bool(0.5),
                        thread_pool: rng.gen_bool(0.5),
                        connection_pool: rng.gen_bool(0.5),
                        turbo_start: rng.gen_bool(0.5),
                    };
                    let spec = TransferSpec::new(
                        topo.clone(),
                        Strategy::Split,
                        features,
                        reference_relay_path(),
                        size,
                    );
                    let mut sim = Sim::new(&topo, 31 * i as u64 + 7);
                    sim.install_server("server", SERVER_PORT, spec.server_params);
                    let ingress = install_relay_chain(
                        &mut sim,
                        &topo,
                        &spec.path,
                        features,
                        &spec,
                    )
                    .unwrap();
                    let client = topo.host_index("client").unwrap();
                    let flow = sim.add_flow(
                        "client",
                        ingress,
                        vec![client, ingress.node],
                        spec.client_params,
                        size,
                        WARMUP_NS,
                        0,
                    );
                    let abort = rng.gen_bool(0.10);
                    if abort {
                        let at = WARMUP_NS + rng.gen_range(10_000_000..3_000_000_000u64);
                        sim.schedule_abort(flow, at);
                    }
                    sim.run_until_idle();
                    let f = &sim.flows[flow];
                    let good = match f.state {
                        FlowState::Done => {
                            f.bytes_received == size && f.digest() == expected_digest(size)
                        }
                        // Aborted: whatever prefix arrived must match the
                        // sent prefix byte for byte.
                        _ => {
                            abort
                                && f.bytes_received <= size
                                && f.digest() == expected_digest(f.bytes_received)
                        }
                    };
                    if !good {
                        failures.lock().unwrap().push(format!(
                            "transfer {i}: size {size} features {} abort {abort} state {:?} got {} bytes",
                            features.label(),
                            f.state,
                            f.bytes_received
                        ));
                    }
                }
            });
        }
    });
    let failures = failures.into_inner().unwrap();
    let ok = verdict(
        9,
        "randomized stream integrity",
        failures.is_empty(),
        &format!("{total} transfers, {} bad: {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    );
    assert!(ok);
}

#[test]
fn c10_preamble_golden_vectors() {
    let v4: std::net::SocketAddr = "192.0.2.1:8080".parse().unwrap();
    let enc4 = encode_preamble(v4);
    let want4 = [0x4F, 0x43, 0x44, 0x31, 0x04, 0xC0, 0x00, 0x02, 0x01, 0x1F, 0x90];
    let v6: std::net::SocketAddr = "[2001:db8::1]:443".parse().unwrap();
    let enc6 = encode_preamble(v6);
    let mut want6 = vec![0x4F, 0x43, 0x44, 0x31, 0x06];
    want6.extend_from_slice(&[
        0x20, 0x01, 0x0D, 0xB8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x01,
    ]);
    want6.extend_from_slice(&[0x01, 0xBB]);
    let mut ok = enc4 == want4 && enc6 == want6;
    ok &= decode_preamble(&enc4).unwrap() == Some((v4, enc4.len()));
    ok &= decode_preamble(&enc6).unwrap() == Some((v6, enc6.len()));
    // Truncation: every proper prefix asks for more bytes.
    for cut in 0..enc6.len() {
        ok &= decode_preamble(&enc6[..cut]).unwrap().is_none();
    }
    ok &= decode_preamble(b"NOPE.......") == Err(PreambleError::BadMagic);
    let ok = verdict(10, "preamble golden vectors", ok, "ipv4/ipv6/truncation/bad magic");
    assert!(ok);
}

#[test]
fn c11_estimator_correlation() {
    let nosplit = rtt_sweep(EstimatorKind::Nosplit, 30, 42).unwrap();
    let rho_ns = spearman(&nosplit);
    let mid = rtt_sweep(EstimatorKind::MidRelay, 30, 43).unwrap();
    let rho_mid = spearman(&mid);
    let ok = verdict(
        11,
        "estimator rank correlation",
        rho_ns > 0.5 && rho_mid > 0.0,
        &format!("no-split rho {rho_ns:.3} (>0.5), 3-relay rho {rho_mid:.3} (>0)"),
    );
    assert!(ok);
}
