//! Failure/repair traces: parsing, synthesis, rate estimation and the
//! sampling helpers used by the rescheduling policies and the simulator.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One down interval of one node: `[down_start, down_end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub node_id: usize,
    pub down_start: f64,
    pub down_end: f64,
}

/// Per-node timeline of down intervals over `[0, horizon]` seconds.
///
/// Outages of the same node are non-overlapping and sorted by start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTrace {
    pub node_count: usize,
    pub outages: Vec<Outage>,
    pub horizon: f64,
}

/// Failure and repair rates of a single processor, with the underlying means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub lambda: f64,
    pub theta: f64,
    pub mttf: f64,
    pub mttr: f64,
}

/// A randomly placed execution window within a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSegment {
    pub start: f64,
    pub dur: f64,
}

impl FailureTrace {
    /// Validates the trace invariants, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.node_count == 0 {
            return Err(Error::InvalidArg("node_count must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArg("horizon must be positive".into()));
        }
        let mut last_end = vec![f64::NEG_INFINITY; self.node_count];
        for (i, o) in self.outages.iter().enumerate() {
            if o.node_id >= self.node_count {
                return Err(Error::InvalidArg(format!(
                    "outage {i}: node_id {} out of range 0..{}",
                    o.node_id, self.node_count
                )));
            }
            if !(o.down_start >= 0.0 && o.down_start < o.down_end && o.down_end <= self.horizon) {
                return Err(Error::InvalidArg(format!(
                    "outage {i}: invalid interval [{}, {}]",
                    o.down_start, o.down_end
                )));
            }
            if o.down_start < last_end[o.node_id] {
                return Err(Error::InvalidArg(format!(
                    "outage {i}: overlaps previous outage of node {}",
                    o.node_id
                )));
            }
            last_end[o.node_id] = o.down_end;
        }
        Ok(())
    }

    /// Outages of one node, in start order.
    pub fn node_outages(&self, node: usize) -> impl Iterator<Item = &Outage> {
        self.outages.iter().filter(move |o| o.node_id == node)
    }
}

/// Parses the trace CSV: header `nodes=<N>,horizon=<seconds>`, then
/// `node_id,down_start,down_end` rows sorted by (node_id, down_start).
pub fn parse_trace(text: &str) -> Result<FailureTrace> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::TraceParse { line: 1, msg: "empty input".into() })?;
    let (node_count, horizon) = parse_header(header)?;

    let mut outages: Vec<Outage> = Vec::new();
    let mut last_key: Option<(usize, f64)> = None;
    let mut last_end = vec![f64::NEG_INFINITY; node_count];
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let node_id: usize = next_field(&mut it, lineno, "node_id")?;
        let down_start: f64 = next_field(&mut it, lineno, "down_start")?;
        let down_end: f64 = next_field(&mut it, lineno, "down_end")?;
        if it.next().is_some() {
            return Err(Error::TraceParse { line: lineno, msg: "too many fields".into() });
        }
        if node_id >= node_count {
            return Err(Error::TraceParse {
                line: lineno,
                msg: format!("node_id {node_id} out of range 0..{node_count}"),
            });
        }
        if !(down_end > down_start) {
            return Err(Error::TraceParse {
                line: lineno,
                msg: format!("down_end {down_end} <= down_start {down_start}"),
            });
        }
        if !(down_start >= 0.0 && down_end <= horizon) {
            return Err(Error::TraceParse {
                line: lineno,
                msg: format!("interval [{down_start}, {down_end}] outside [0, {horizon}]"),
            });
        }
        if let Some((ln, ls)) = last_key {
            if (node_id, down_start) < (ln, ls) {
                return Err(Error::TraceParse {
                    line: lineno,
                    msg: "rows not sorted by (node_id, down_start)".into(),
                });
            }
        }
        if down_start < last_end[node_id] {
            return Err(Error::TraceParse {
                line: lineno,
                msg: format!("overlaps previous outage of node {node_id}"),
            });
        }
        last_key = Some((node_id, down_start));
        last_end[node_id] = down_end;
        outages.push(Outage { node_id, down_start, down_end });
    }
    let trace = FailureTrace { node_count, outages, horizon };
    trace.validate()?;
    Ok(trace)
}

/// Writes the CSV form accepted by [`parse_trace`].
pub fn serialize_trace(trace: &FailureTrace) -> String {
    let mut out = format!("nodes={},horizon={}\n", trace.node_count, trace.horizon);
    let mut sorted: Vec<&Outage> = trace.outages.iter().collect();
    sorted.sort_by(|a, b| {
        (a.node_id, a.down_start)
            .partial_cmp(&(b.node_id, b.down_start))
            .unwrap()
    });
    for o in sorted {
        out.push_str(&format!("{},{},{}\n", o.node_id, o.down_start, o.down_end));
    }
    out
}

fn parse_header(header: &str) -> Result<(usize, f64)> {
    let err = |msg: &str| Error::TraceParse { line: 1, msg: msg.into() };
    let mut nodes = None;
    let mut horizon = None;
    for part in header.trim().split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| err("header must be nodes=<N>,horizon=<seconds>"))?;
        match k.trim() {
            "nodes" => nodes = Some(v.trim().parse::<usize>().map_err(|e| err(&e.to_string()))?),
            "horizon" => {
                horizon = Some(v.trim().parse::<f64>().map_err(|e| err(&e.to_string()))?)
            }
            other => return Err(err(&format!("unknown header key `{other}`"))),
        }
    }
    match (nodes, horizon) {
        (Some(n), Some(h)) if n > 0 && h > 0.0 => Ok((n, h)),
        _ => Err(err("header must declare positive nodes and horizon")),
    }
}

fn next_field<T: std::str::FromStr>(
    it: &mut std::str::Split<'_, char>,
    line: usize,
    name: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = it
        .next()
        .ok_or_else(|| Error::TraceParse { line, msg: format!("missing field {name}") })?;
    raw.trim().parse::<T>().map_err(|e| Error::TraceParse {
        line,
        msg: format!("bad {name} `{}`: {e}", raw.trim()),
    })
}

/// Estimates per-processor failure and repair rates from history before `at`.
///
/// Per-node MTTF is the mean gap between consecutive failure starts (the gap
/// from time 0 to the first failure counts); per-node MTTR is the mean length
/// of outages ending before `at`. λ and θ are reciprocals of the across-node
/// averages. Nodes without events before `at` are left out of the respective
/// average.
pub fn estimate_rates(trace: &FailureTrace, at: f64) -> Result<RateEstimate> {
    let mut mttfs = Vec::new();
    let mut mttrs = Vec::new();
    for node in 0..trace.node_count {
        let mut gaps = Vec::new();
        let mut repairs = Vec::new();
        let mut prev_start: Option<f64> = None;
        for o in trace.node_outages(node) {
            if o.down_start < at {
                let gap = match prev_start {
                    None => o.down_start,
                    Some(p) => o.down_start - p,
                };
                gaps.push(gap);
                prev_start = Some(o.down_start);
            }
            if o.down_end <= at {
                repairs.push(o.down_end - o.down_start);
            }
        }
        if !gaps.is_empty() {
            mttfs.push(gaps.iter().sum::<f64>() / gaps.len() as f64);
        }
        if !repairs.is_empty() {
            mttrs.push(repairs.iter().sum::<f64>() / repairs.len() as f64);
        }
    }
    if mttfs.is_empty() || mttrs.is_empty() {
        return Err(Error::NoHistory { at });
    }
    let mttf = mttfs.iter().sum::<f64>() / mttfs.len() as f64;
    let mttr = mttrs.iter().sum::<f64>() / mttrs.len() as f64;
    if !(mttf > 0.0 && mttr > 0.0) {
        return Err(Error::NoHistory { at });
    }
    Ok(RateEstimate { lambda: 1.0 / mttf, theta: 1.0 / mttr, mttf, mttr })
}

/// Number of functional processors at time `t` (an outage covers
/// `down_start <= t < down_end`).
pub fn functional_count(trace: &FailureTrace, t: f64) -> usize {
    let down = trace
        .outages
        .iter()
        .filter(|o| o.down_start <= t && t < o.down_end)
        .count();
    trace.node_count - down
}

/// Draws a random execution window: duration uniform on `[min_dur, max_dur]`,
/// start uniform on `[0, horizon - dur]`.
pub fn sample_segment(
    trace: &FailureTrace,
    min_dur: f64,
    max_dur: f64,
    rng: &mut impl Rng,
) -> ExecutionSegment {
    assert!(0.0 < min_dur && min_dur <= max_dur && max_dur <= trace.horizon);
    let dur = if min_dur == max_dur { min_dur } else { rng.gen_range(min_dur..=max_dur) };
    let max_start = trace.horizon - dur;
    let start = if max_start > 0.0 { rng.gen_range(0.0..=max_start) } else { 0.0 };
    ExecutionSegment { start, dur }
}

/// Average per-processor failure count for random `n`-node subsets.
///
/// Each trial picks `n` distinct nodes uniformly; failures are distinct outage
/// start times among the chosen nodes (simultaneous starts collapse into one
/// event), divided by `n`. Returns the mean over `trials`. Each trial derives
/// its substream from (seed, trial index), so the result is seed-stable and
/// independent of evaluation order.
pub fn avg_failures(trace: &FailureTrace, n: usize, trials: usize, seed: u64) -> f64 {
    assert!(n >= 1 && n <= trace.node_count && trials >= 1);
    let total: f64 = (0..trials)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64 + 1);
            let chosen = index_sample(&mut rng, trace.node_count, n).into_vec();
            subset_failures(trace, &chosen) / n as f64
        })
        .sum();
    total / trials as f64
}

/// Distinct failure-start events among the given nodes.
pub fn subset_failures(trace: &FailureTrace, nodes: &[usize]) -> f64 {
    let mut starts: Vec<f64> = trace
        .outages
        .iter()
        .filter(|o| nodes.contains(&o.node_id))
        .map(|o| o.down_start)
        .collect();
    starts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    starts.dedup();
    starts.len() as f64
}

/// Generates a synthetic trace: each node independently alternates
/// Exponential(lambda) up times and Exponential(theta) down times,
/// truncated at `horizon`. Deterministic per seed.
pub fn synth_trace(n: usize, lambda: f64, theta: f64, horizon: f64, seed: u64) -> FailureTrace {
    assert!(n >= 1 && lambda > 0.0 && theta > 0.0 && horizon > 0.0);
    let mut outages = Vec::new();
    for node in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(node as u64 + 1);
        let mut t = 0.0;
        loop {
            t += sample_exp(&mut rng, lambda);
            if t >= horizon {
                break;
            }
            let down_start = t;
            t += sample_exp(&mut rng, theta);
            let down_end = t.min(horizon);
            if down_end > down_start {
                outages.push(Outage { node_id: node, down_start, down_end });
            }
            if t >= horizon {
                break;
            }
        }
    }
    outages.sort_by(|a, b| {
        (a.node_id, a.down_start)
            .partial_cmp(&(b.node_id, b.down_start))
            .unwrap()
    });
    FailureTrace { node_count: n, outages, horizon }
}

fn sample_exp(rng: &mut impl Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -u.ln() / rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_failure_trace() -> FailureTrace {
        parse_trace("nodes=1,horizon=10000\n0,100,110\n0,200,210\n").unwrap()
    }

    #[test]
    fn parse_basic() {
        let t = parse_trace("nodes=2,horizon=1000\n0,100,110\n1,500,560\n").unwrap();
        assert_eq!(t.node_count, 2);
        assert_eq!(t.outages.len(), 2);
        assert_eq!(t.horizon, 1000.0);
    }

    #[test]
    fn parse_empty_outages() {
        let t = parse_trace("nodes=3,horizon=1000\n").unwrap();
        assert!(t.outages.is_empty());
    }

    #[test]
    fn parse_overlap_rejected() {
        let err = parse_trace("nodes=1,horizon=1000\n0,100,110\n0,105,120\n").unwrap_err();
        match err {
            Error::TraceParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn parse_rejects_reversed_interval() {
        assert!(parse_trace("nodes=1,horizon=1000\n0,110,100\n").is_err());
    }

    #[test]
    fn parse_rejects_out_of_range_node() {
        assert!(parse_trace("nodes=1,horizon=1000\n1,100,110\n").is_err());
    }

    #[test]
    fn serialize_round_trip() {
        let t = parse_trace("nodes=2,horizon=1000\n0,100,110.5\n1,500,560\n").unwrap();
        let again = parse_trace(&serialize_trace(&t)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn rates_two_point() {
        let r = estimate_rates(&two_failure_trace(), 1000.0).unwrap();
        assert_relative_eq!(r.mttf, 100.0);
        assert_relative_eq!(r.mttr, 10.0);
        assert_relative_eq!(r.lambda, 0.01);
        assert_relative_eq!(r.theta, 0.1);
    }

    #[test]
    fn rates_symmetric_across_nodes() {
        let t = parse_trace(
            "nodes=2,horizon=10000\n0,100,110\n0,200,210\n1,100,110\n1,200,210\n",
        )
        .unwrap();
        let r1 = estimate_rates(&two_failure_trace(), 1000.0).unwrap();
        let r2 = estimate_rates(&t, 1000.0).unwrap();
        assert_relative_eq!(r1.lambda, r2.lambda);
        assert_relative_eq!(r1.theta, r2.theta);
    }

    #[test]
    fn rates_need_history() {
        let t = parse_trace("nodes=1,horizon=1000\n").unwrap();
        assert!(matches!(estimate_rates(&t, 500.0), Err(Error::NoHistory { .. })));
    }

    #[test]
    fn rates_relabel_invariant() {
        let t = parse_trace("nodes=2,horizon=10000\n0,100,120\n1,300,330\n1,900,960\n").unwrap();
        let swapped = FailureTrace {
            node_count: 2,
            outages: t
                .outages
                .iter()
                .map(|o| Outage { node_id: 1 - o.node_id, ..*o })
                .collect(),
            horizon: t.horizon,
        };
        let a = estimate_rates(&t, 5000.0).unwrap();
        let b = estimate_rates(&swapped, 5000.0).unwrap();
        assert_relative_eq!(a.lambda, b.lambda);
        assert_relative_eq!(a.theta, b.theta);
    }

    #[test]
    fn rates_recover_synthetic() {
        // between-failure-start gaps include repair time, so recovery of the
        // generating lambda needs mttr << mttf (expected gap = mttf + mttr)
        let lambda = 1.0 / 3600.0;
        let theta = 1.0 / 60.0;
        let t = synth_trace(16, lambda, theta, 5_000_000.0, 7);
        let r = estimate_rates(&t, t.horizon).unwrap();
        assert!((r.lambda - lambda).abs() / lambda < 0.10, "lambda {} vs {}", r.lambda, lambda);
        assert!((r.theta - theta).abs() / theta < 0.10, "theta {} vs {}", r.theta, theta);
    }

    #[test]
    fn functional_count_cases() {
        let t = parse_trace("nodes=4,horizon=1000\n0,100,110\n").unwrap();
        assert_eq!(functional_count(&t, 105.0), 3);
        assert_eq!(functional_count(&t, 50.0), 4);
        let all_down = parse_trace("nodes=2,horizon=1000\n0,100,200\n1,150,250\n").unwrap();
        assert_eq!(functional_count(&all_down, 160.0), 0);
    }

    #[test]
    fn functional_count_drops_at_start() {
        let t = parse_trace("nodes=2,horizon=1000\n0,100,200\n").unwrap();
        assert_eq!(functional_count(&t, 99.999), 2);
        assert_eq!(functional_count(&t, 100.0), 1);
        assert_eq!(functional_count(&t, 200.0), 2);
    }

    #[test]
    fn segment_fixed_duration_and_determinism() {
        let t = parse_trace("nodes=1,horizon=1000\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_segment(&t, 50.0, 50.0, &mut rng);
        assert_eq!(s.dur, 50.0);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let s2 = sample_segment(&t, 50.0, 50.0, &mut rng2);
        assert_eq!(s, s2);
        assert!(s.start >= 0.0 && s.start + s.dur <= t.horizon);
    }

    #[test]
    fn segment_start_coarsely_uniform() {
        let t = parse_trace("nodes=1,horizon=1000\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut deciles = [0usize; 10];
        let n = 1000;
        for _ in 0..n {
            let s = sample_segment(&t, 1.0, 1.0, &mut rng);
            let d = ((s.start / 999.0 * 10.0) as usize).min(9);
            deciles[d] += 1;
        }
        for &c in &deciles {
            assert!((50..=150).contains(&c), "decile count {c} outside 5-15%");
        }
    }

    #[test]
    fn avg_failures_full_set_is_deterministic() {
        let t = parse_trace("nodes=3,horizon=1000\n0,10,20\n0,30,40\n1,10,15\n2,500,600\n")
            .unwrap();
        // starts: 10 (nodes 0 and 1, same instant), 30, 500 -> 3 distinct events
        let a = avg_failures(&t, 3, 5, 1);
        let b = avg_failures(&t, 3, 5, 99);
        assert_relative_eq!(a, 1.0);
        assert_relative_eq!(a, b);
    }

    #[test]
    fn avg_failures_empty_trace_is_zero() {
        let t = parse_trace("nodes=3,horizon=1000\n").unwrap();
        assert_eq!(avg_failures(&t, 2, 10, 1), 0.0);
    }

    #[test]
    fn avg_failures_matches_expectation() {
        // per-node counts (4,1,1); picking a single node uniformly gives mean 2.0
        let t = parse_trace(
            "nodes=3,horizon=1000\n0,10,11\n0,20,21\n0,30,31\n0,40,41\n1,100,101\n2,200,201\n",
        )
        .unwrap();
        let a = avg_failures(&t, 1, 3000, 5);
        assert!((a - 2.0).abs() / 2.0 < 0.05, "got {a}");
    }

    #[test]
    fn synth_trace_deterministic() {
        let a = synth_trace(4, 1e-4, 1e-2, 100_000.0, 42);
        let b = synth_trace(4, 1e-4, 1e-2, 100_000.0, 42);
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn synth_trace_short_horizon_no_outages() {
        // expected first failure ~1e6 s; 1 s horizon yields nothing
        let t = synth_trace(8, 1e-6, 1e-2, 1.0, 42);
        assert!(t.outages.is_empty());
    }
}
