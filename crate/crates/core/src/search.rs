//! Candidate-interval exploration against the analytic model: doubling sweep
//! from a minimum interval, refinement over the top scoring region, and
//! averaging of the near-optimal band into the recommended interval.

use serde::Serialize;

use crate::chain::{build_chain, eliminate_states, stationary, uwt, DeltaPolicy};
use crate::error::{Error, Result};
use crate::policy::RpVector;
use crate::profile::AppProfile;

/// One evaluated (interval, UWT) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub interval: f64,
    pub uwt: f64,
}

/// Search result: the recommended interval, the band it was averaged from,
/// every evaluated point and provenance metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub i_model: f64,
    pub band: Vec<SweepPoint>,
    pub sweep: Vec<SweepPoint>,
    pub thres_used: f64,
    pub delta_policy: DeltaPolicy,
    /// Up states eliminated at the best evaluated interval.
    pub elims: usize,
    /// Doubling-phase cap was hit before UWT turned down.
    pub capped: bool,
}

/// Search knobs with the documented defaults.
#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub i_min: f64,
    pub band_pct: f64,
    pub thres: f64,
    pub delta_policy: DeltaPolicy,
    pub refine_steps: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            i_min: 300.0,
            band_pct: 0.08,
            thres: 0.0006,
            delta_policy: DeltaPolicy::MeanIn,
            refine_steps: 6,
        }
    }
}

const MAX_DOUBLINGS: usize = 30;

/// Full model evaluation of one interval: build, eliminate, solve, score.
fn evaluate(
    n: usize,
    rp: &RpVector,
    profile: &AppProfile,
    lambda: f64,
    theta: f64,
    interval: f64,
    opts: &SearchOptions,
) -> Result<(f64, usize)> {
    let attach = |e: Error| Error::Search { interval, source: Box::new(e) };
    let chain = build_chain(n, rp, profile, lambda, theta, interval, opts.delta_policy)
        .map_err(attach)?;
    let reduced = eliminate_states(&chain, opts.thres).map_err(attach)?;
    let dist = stationary(&reduced).map_err(attach)?;
    let value = uwt(&reduced, &dist).map_err(attach)?;
    Ok((value, reduced.elims))
}

/// Recommends a checkpoint interval for the given system and application.
///
/// Phase 1 doubles the interval from `i_min` until UWT drops. Phase 2 bisects
/// inside the hull of the top-3 points for `refine_steps` extra evaluations.
/// Phase 3 averages all intervals whose UWT is within `band_pct` of the best.
pub fn recommend_interval(
    n: usize,
    rp: &RpVector,
    profile: &AppProfile,
    lambda: f64,
    theta: f64,
    opts: &SearchOptions,
) -> Result<Recommendation> {
    if !(opts.i_min > 0.0) {
        return Err(Error::InvalidArg("i_min must be positive".into()));
    }
    let mut eval_cached = {
        let mut seen: Vec<(f64, f64, usize)> = Vec::new();
        move |interval: f64| -> Result<(f64, usize)> {
            if let Some(&(_, v, e)) = seen.iter().find(|&&(i, _, _)| i == interval) {
                return Ok((v, e));
            }
            let (v, e) = evaluate(n, rp, profile, lambda, theta, interval, opts)?;
            seen.push((interval, v, e));
            Ok((v, e))
        }
    };

    // phase 1: doubling sweep, at least 2 points, stop on first decrease
    let mut sweep: Vec<(SweepPoint, usize)> = Vec::new();
    let mut interval = opts.i_min;
    let mut capped = true;
    for step in 0..=MAX_DOUBLINGS {
        let (value, elims) = eval_cached(interval)?;
        sweep.push((SweepPoint { interval, uwt: value }, elims));
        if step >= 1 && value < sweep[step - 1].0.uwt {
            capped = false;
            break;
        }
        interval *= 2.0;
    }

    // phase 2: bisection probes over the hull of the top-3 UWT values
    let hull = {
        let mut by_uwt: Vec<SweepPoint> = sweep.iter().map(|(p, _)| *p).collect();
        by_uwt.sort_by(|a, b| b.uwt.partial_cmp(&a.uwt).unwrap());
        let top: Vec<f64> = by_uwt.iter().take(3).map(|p| p.interval).collect();
        let lo = top.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = top.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    for _ in 0..opts.refine_steps {
        let mut inside: Vec<SweepPoint> = sweep
            .iter()
            .map(|(p, _)| *p)
            .filter(|p| hull.0 <= p.interval && p.interval <= hull.1)
            .collect();
        inside.sort_by(|a, b| a.interval.partial_cmp(&b.interval).unwrap());
        if inside.len() < 2 {
            break;
        }
        let best = inside
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.uwt.partial_cmp(&b.1.uwt).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        // probe the midpoint toward the better-scoring neighbor, falling back
        // to the wider gap at the hull edges
        let neighbor = match (best.checked_sub(1), inside.get(best + 1)) {
            (Some(l), Some(r)) => {
                if inside[l].uwt >= r.uwt {
                    l
                } else {
                    best + 1
                }
            }
            (Some(l), None) => l,
            (None, Some(_)) => best + 1,
            (None, None) => break,
        };
        let probe = 0.5 * (inside[best].interval + inside[neighbor].interval);
        if inside.iter().any(|p| p.interval == probe) {
            break;
        }
        let (value, elims) = eval_cached(probe)?;
        sweep.push((SweepPoint { interval: probe, uwt: value }, elims));
    }

    // phase 3: average the band within band_pct of the best UWT
    let mut points: Vec<(SweepPoint, usize)> = sweep;
    points.sort_by(|a, b| a.0.interval.partial_cmp(&b.0.interval).unwrap());
    points.dedup_by(|a, b| a.0.interval == b.0.interval);
    let (best_point, best_elims) = points
        .iter()
        .max_by(|a, b| a.0.uwt.partial_cmp(&b.0.uwt).unwrap())
        .copied()
        .map(|(p, e)| (p, e))
        .unwrap();
    let cutoff = (1.0 - opts.band_pct) * best_point.uwt;
    let band: Vec<SweepPoint> = points
        .iter()
        .map(|(p, _)| *p)
        .filter(|p| p.uwt >= cutoff)
        .collect();
    let i_model = band.iter().map(|p| p.interval).sum::<f64>() / band.len() as f64;

    Ok(Recommendation {
        i_model,
        band,
        sweep: points.into_iter().map(|(p, _)| p).collect(),
        thres_used: opts.thres,
        delta_policy: opts.delta_policy,
        elims: best_elims,
        capped,
    })
}

/// Sweep CSV (`interval_s,uwt`) for plotting.
pub fn sweep_csv(rec: &Recommendation) -> String {
    let mut out = String::from("interval_s,uwt\n");
    for p in &rec.sweep {
        out.push_str(&format!("{},{}\n", p.interval, p.uwt));
    }
    out
}
