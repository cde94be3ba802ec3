//! Rescheduling policies: how many processors to run on given the number of
//! functional processors available.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::AppProfile;
use crate::trace::{avg_failures, FailureTrace};

/// The rescheduling policy vector: `rp[i]` (1-indexed through [`RpVector::at`])
/// is the processor count chosen when `i` functional processors are available.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpVector {
    pub n: usize,
    pub rp: Vec<usize>,
}

impl RpVector {
    /// Chosen processor count for `avail` functional processors (1-indexed).
    pub fn at(&self, avail: usize) -> usize {
        self.rp[avail - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.rp.len() != self.n {
            return Err(Error::Policy(format!(
                "rp has length {}, expected n={}",
                self.rp.len(),
                self.n
            )));
        }
        for (i, &r) in self.rp.iter().enumerate() {
            let avail = i + 1;
            if r < 1 || r > avail {
                return Err(Error::Policy(format!(
                    "rp[{avail}] = {r} outside 1..={avail}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Use every available processor.
    Greedy,
    /// Performance based: the prefix count with the highest work rate.
    Pb,
    /// Availability based: the prefix count with the fewest average failures.
    Ab,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(PolicyKind::Greedy),
            "pb" => Ok(PolicyKind::Pb),
            "ab" => Ok(PolicyKind::Ab),
            other => Err(Error::Policy(format!("unknown policy kind `{other}`"))),
        }
    }
}

/// Builds the rescheduling policy vector.
///
/// Greedy takes all available processors. PB picks, for each availability
/// `i`, the count `n' <= i` maximizing the work rate (minimal failure-free
/// execution time). AB picks the count minimizing the trace's average failure
/// count from [`avg_failures`]. Ties break toward the smaller count.
pub fn build_rp(
    kind: PolicyKind,
    n: usize,
    profile: Option<&AppProfile>,
    trace: Option<&FailureTrace>,
    trials: usize,
    seed: u64,
) -> Result<RpVector> {
    if n == 0 {
        return Err(Error::Policy("n must be >= 1".into()));
    }
    let rp = match kind {
        PolicyKind::Greedy => (1..=n).collect(),
        PolicyKind::Pb => {
            let profile = profile.ok_or_else(|| Error::Policy("pb policy needs a profile".into()))?;
            if profile.n_max < n {
                return Err(Error::Policy(format!(
                    "profile covers {} processors, need {n}",
                    profile.n_max
                )));
            }
            (1..=n)
                .map(|i| argbest(1..=i, |a| profile.work_at(a), true))
                .collect()
        }
        PolicyKind::Ab => {
            let trace = trace.ok_or_else(|| Error::Policy("ab policy needs a trace".into()))?;
            if trace.node_count < n {
                return Err(Error::Policy(format!(
                    "trace has {} nodes, need {n}",
                    trace.node_count
                )));
            }
            let scores: Vec<f64> =
                (1..=n).map(|a| avg_failures(trace, a, trials, seed)).collect();
            (1..=n)
                .map(|i| argbest(1..=i, |a| scores[a - 1], false))
                .collect()
        }
    };
    let v = RpVector { n, rp };
    v.validate()?;
    Ok(v)
}

/// Smallest index achieving the max (or min) of `f` over the range.
fn argbest(range: std::ops::RangeInclusive<usize>, f: impl Fn(usize) -> f64, max: bool) -> usize {
    let mut best = *range.start();
    let mut best_v = f(best);
    for a in range {
        let v = f(a);
        let better = if max { v > best_v } else { v < best_v };
        if better {
            best = a;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{fit_profile, BenchmarkPoint, FitModel};
    use crate::trace::parse_trace;

    fn profile_from_work(work: &[f64]) -> AppProfile {
        AppProfile {
            n_max: work.len(),
            work: work.to_vec(),
            ckpt: vec![1.0; work.len()],
            recov: vec![vec![1.0; work.len()]; work.len()],
        }
    }

    #[test]
    fn greedy_is_identity() {
        let v = build_rp(PolicyKind::Greedy, 4, None, None, 50, 42).unwrap();
        assert_eq!(v.rp, vec![1, 2, 3, 4]);
    }

    #[test]
    fn pb_monotone_work_matches_greedy() {
        let p = profile_from_work(&[1.0, 2.0, 3.0, 4.0]);
        let v = build_rp(PolicyKind::Pb, 4, Some(&p), None, 50, 42).unwrap();
        assert_eq!(v.rp, vec![1, 2, 3, 4]);
    }

    #[test]
    fn pb_prefix_argmax() {
        let p = profile_from_work(&[5.0, 4.0, 6.0]);
        let v = build_rp(PolicyKind::Pb, 3, Some(&p), None, 50, 42).unwrap();
        assert_eq!(v.rp, vec![1, 1, 3]);
    }

    #[test]
    fn pb_scale_invariant() {
        let p = profile_from_work(&[5.0, 4.0, 6.0, 5.5]);
        let q = profile_from_work(&[50.0, 40.0, 60.0, 55.0]);
        let a = build_rp(PolicyKind::Pb, 4, Some(&p), None, 50, 42).unwrap();
        let b = build_rp(PolicyKind::Pb, 4, Some(&q), None, 50, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ab_prefers_reliable_subsets() {
        // node 2 never fails; nodes 0 and 1 fail 10 times each
        let mut text = String::from("nodes=3,horizon=100000\n");
        for i in 0..10 {
            text.push_str(&format!("0,{},{}\n", 100 + i * 100, 150 + i * 100));
        }
        for i in 0..10 {
            text.push_str(&format!("1,{},{}\n", 120 + i * 100, 160 + i * 100));
        }
        let t = parse_trace(&text).unwrap();

        // exhaustive oracle over all subsets per size instead of sampling
        let oracle = |size: usize| -> f64 {
            let nodes = [0usize, 1, 2];
            let mut sum = 0.0;
            let mut count = 0usize;
            for mask in 1u32..8 {
                let chosen: Vec<usize> =
                    nodes.iter().copied().filter(|&i| mask & (1 << i) != 0).collect();
                if chosen.len() == size {
                    sum += crate::trace::subset_failures(&t, &chosen) / size as f64;
                    count += 1;
                }
            }
            sum / count as f64
        };
        // size 1 averages (10+10+0)/3; with enough trials the sampled value
        // tracks the exhaustive expectation
        let sampled = avg_failures(&t, 1, 3000, 9);
        assert!((sampled - oracle(1)).abs() / oracle(1) < 0.05);

        let v = build_rp(PolicyKind::Ab, 3, None, Some(&t), 200, 9).unwrap();
        assert_eq!(v.at(1), 1);
        v.validate().unwrap();
    }

    #[test]
    fn ab_deterministic_per_seed() {
        let t = crate::trace::synth_trace(5, 1e-4, 1e-2, 500_000.0, 3);
        let a = build_rp(PolicyKind::Ab, 5, None, Some(&t), 50, 7).unwrap();
        let b = build_rp(PolicyKind::Ab, 5, None, Some(&t), 50, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_inputs_rejected() {
        assert!(build_rp(PolicyKind::Pb, 3, None, None, 50, 42).is_err());
        assert!(build_rp(PolicyKind::Ab, 3, None, None, 50, 42).is_err());
    }

    #[test]
    fn fitted_profile_feeds_pb() {
        let pts = [
            BenchmarkPoint::Work { a: 1, value: 1.0 },
            BenchmarkPoint::Work { a: 2, value: 1.9 },
            BenchmarkPoint::Ckpt { a: 1, value: 1.0 },
        ];
        let p = fit_profile(&pts, 6, FitModel::PowerLaw, Some(1.0)).unwrap();
        let v = build_rp(PolicyKind::Pb, 6, Some(&p), None, 50, 42).unwrap();
        assert_eq!(v.rp, vec![1, 2, 3, 4, 5, 6]);
    }
}
