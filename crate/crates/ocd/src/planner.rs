//! RTT measurement aggregation and relay selection. Proximity is
//! operationalized as minimum measured RTT; there is no geo database.

use std::collections::HashMap;
use std::time::Duration;

use thiserror::Error;

pub const DEFAULT_PROBE_COUNT: usize = 20;
pub const DEFAULT_PROBE_INTERVAL: Duration = Duration::from_millis(100);

/// Minimum-of-probes RTT table, symmetric on insert.
#[derive(Debug, Clone, Default)]
pub struct RttTable {
    entries: HashMap<(String, String), f64>,
    pub probe_count: usize,
    pub probe_interval: Duration,
}

impl RttTable {
    pub fn new() -> Self {
        RttTable {
            entries: HashMap::new(),
            probe_count: DEFAULT_PROBE_COUNT,
            probe_interval: DEFAULT_PROBE_INTERVAL,
        }
    }

    fn key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    /// Keeps the minimum of everything inserted for the pair.
    pub fn insert(&mut self, a: &str, b: &str, rtt_ms: f64) {
        let e = self.entries.entry(Self::key(a, b)).or_insert(f64::INFINITY);
        *e = e.min(rtt_ms);
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        self.entries.get(&Self::key(a, b)).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.entries.iter().map(|((a, b), v)| (a.as_str(), b.as_str(), *v))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("host unreachable: all {0} probes failed")]
    Unreachable(usize),
    #[error("no relays to choose from")]
    NoRelays,
    #[error("rtt table is missing an entry for ({0}, {1})")]
    MissingEntry(String, String),
}

/// Minimum of `n` round-trip samples; failed probes are excluded so
/// transient losses do not poison the minimum. Fails only if every probe
/// fails.
pub fn measure_rtt<F>(mut probe: F, n: usize) -> Result<f64, PlanError>
where
    F: FnMut() -> Option<f64>,
{
    assert!(n >= 1);
    let mut best: Option<f64> = None;
    for _ in 0..n {
        if let Some(sample) = probe() {
            best = Some(best.map_or(sample, |b: f64| b.min(sample)));
        }
    }
    best.ok_or(PlanError::Unreachable(n))
}

/// Picks the relay closest to the client and the relay closest to the
/// server, ties broken by lexicographic host id.
pub fn plan_baseline(
    client: &str,
    server: &str,
    relays: &[String],
    rtt: &RttTable,
) -> Result<(String, String), PlanError> {
    if relays.is_empty() {
        return Err(PlanError::NoRelays);
    }
    let nearest = |anchor: &str| -> Result<String, PlanError> {
        let mut best: Option<(f64, &String)> = None;
        for r in relays {
            let d = rtt
                .get(anchor, r)
                .ok_or_else(|| PlanError::MissingEntry(anchor.into(), r.clone()))?;
            best = Some(match best {
                None => (d, r),
                Some((bd, br)) => {
                    if d < bd || (d == bd && r < br) {
                        (d, r)
                    } else {
                        (bd, br)
                    }
                }
            });
        }
        Ok(best.expect("non-empty relays").1.clone())
    };
    Ok((nearest(client)?, nearest(server)?))
}

/// Predicted gain of an unsplit relay route over the direct path: the ratio
/// of the end-to-end RTT to the route RTT.
pub fn estimate_nosplit_gain(rtt_e2e_ms: f64, rtt_via_relays_ms: f64) -> f64 {
    assert!(rtt_e2e_ms > 0.0 && rtt_via_relays_ms > 0.0);
    rtt_e2e_ms / rtt_via_relays_ms
}

/// Predicted gain of inserting a middle relay into a split route: with
/// splitting, throughput is limited by the slowest segment, so the gain is
/// rtt(rc,rs) / max(rtt(rc,mid), rtt(mid,rs)).
pub fn estimate_midrelay_gain(rtt_cs_ms: f64, rtt_cm_ms: f64, rtt_ms_ms: f64) -> f64 {
    assert!(rtt_cs_ms > 0.0 && rtt_cm_ms > 0.0 && rtt_ms_ms > 0.0);
    rtt_cs_ms / rtt_cm_ms.max(rtt_ms_ms)
}

/// Candidates sorted by middle-relay gain estimate, descending; ties by id.
pub fn rank_mid_relays(
    rc: &str,
    rs: &str,
    candidates: &[String],
    rtt: &RttTable,
) -> Result<Vec<(String, f64)>, PlanError> {
    let cs = rtt
        .get(rc, rs)
        .ok_or_else(|| PlanError::MissingEntry(rc.into(), rs.into()))?;
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let cm = rtt
            .get(rc, c)
            .ok_or_else(|| PlanError::MissingEntry(rc.into(), c.clone()))?;
        let ms = rtt
            .get(c, rs)
            .ok_or_else(|| PlanError::MissingEntry(c.clone(), rs.into()))?;
        out.push((c.clone(), estimate_midrelay_gain(cs, cm, ms)));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// The single-relay-with-splitting configuration has no reliable RTT-based
/// estimator; the planner declines to produce one.
pub fn estimate_single_relay_split_gain() -> Option<f64> {
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_rtt_takes_minimum() {
        let samples = [40.0, 33.0, 35.0];
        let mut i = 0;
        let r = measure_rtt(
            || {
                let s = samples[i];
                i += 1;
                Some(s)
            },
            3,
        );
        assert_eq!(r, Ok(33.0));
    }

    #[test]
    fn measure_rtt_single_sample() {
        assert_eq!(measure_rtt(|| Some(50.0), 1), Ok(50.0));
    }

    #[test]
    fn measure_rtt_skips_failures_and_reports_unreachable() {
        let mut i = 0;
        let r = measure_rtt(
            || {
                i += 1;
                if i == 2 {
                    Some(44.0)
                } else {
                    None
                }
            },
            5,
        );
        assert_eq!(r, Ok(44.0));
        assert_eq!(measure_rtt(|| None, 4), Err(PlanError::Unreachable(4)));
    }

    fn table(entries: &[(&str, &str, f64)]) -> RttTable {
        let mut t = RttTable::new();
        for (a, b, v) in entries {
            t.insert(a, b, *v);
        }
        t
    }

    #[test]
    fn plan_baseline_clear_argmin() {
        let t = table(&[
            ("client", "R1", 30.0),
            ("client", "R2", 80.0),
            ("server", "R1", 200.0),
            ("server", "R2", 25.0),
        ]);
        let (rc, rs) =
            plan_baseline("client", "server", &["R1".into(), "R2".into()], &t).unwrap();
        assert_eq!((rc.as_str(), rs.as_str()), ("R1", "R2"));
    }

    #[test]
    fn plan_baseline_single_relay_degenerates() {
        let t = table(&[("client", "R", 10.0), ("server", "R", 10.0)]);
        let (rc, rs) = plan_baseline("client", "server", &["R".into()], &t).unwrap();
        assert_eq!(rc, rs);
        assert!(plan_baseline("c", "s", &[], &t).is_err());
    }

    #[test]
    fn plan_baseline_reference_placement() {
        // Oregon near the client, Mumbai near the server.
        let t = table(&[
            ("client", "oregon", 32.7),
            ("client", "mumbai", 230.0),
            ("server", "oregon", 220.0),
            ("server", "mumbai", 26.0),
        ]);
        let (rc, rs) =
            plan_baseline("client", "server", &["mumbai".into(), "oregon".into()], &t).unwrap();
        assert_eq!((rc.as_str(), rs.as_str()), ("oregon", "mumbai"));
    }

    #[test]
    fn nosplit_gain_ratios() {
        assert_eq!(estimate_nosplit_gain(300.0, 300.0), 1.0);
        assert_eq!(estimate_nosplit_gain(300.0, 150.0), 2.0);
    }

    #[test]
    fn midrelay_gain_ratios() {
        assert_eq!(estimate_midrelay_gain(200.0, 100.0, 100.0), 2.0);
        assert!((estimate_midrelay_gain(215.0, 180.0, 120.0) - 215.0 / 180.0).abs() < 1e-12);
    }

    #[test]
    fn rank_orders_by_estimate() {
        let t = table(&[
            ("rc", "rs", 200.0),
            ("rc", "good", 100.0),
            ("good", "rs", 100.0),
            ("rc", "bad", 180.0),
            ("bad", "rs", 50.0),
        ]);
        let ranked =
            rank_mid_relays("rc", "rs", &["bad".into(), "good".into()], &t).unwrap();
        assert_eq!(ranked[0].0, "good");
        assert!((ranked[0].1 - 2.0).abs() < 1e-12);
        assert_eq!(ranked[1].0, "bad");
        let empty = rank_mid_relays("rc", "rs", &[], &t).unwrap();
        assert!(empty.is_empty());
    }
}
