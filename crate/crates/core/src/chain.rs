//! The malleable-application Markov chain: state enumeration, transition /
//! weight matrix assembly, low-probability state elimination, stationary
//! distribution and the useful-work-per-unit-time metric.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::RpVector;
use crate::profile::AppProfile;
use crate::spares::{
    build_generator, conditioned_probs, failure_weighted_probs, transient_probs, SpareMatrix,
};

/// One state of the chain.
///
/// `Up { a, s }`: executing on `a` processors with `s` functional spares.
/// `Recovery { a, s }`: recovering onto `a` processors with `s` spares, where
/// `a` is the policy's choice for `a + s` total functional processors.
/// `Down`: no functional processors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum State {
    Down,
    Recovery { a: usize, s: usize },
    Up { a: usize, s: usize },
}

/// Enumerated state space with a stable ordering: down first, then recovery
/// states by total functional count ascending, then up states by (a, s).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    pub n: usize,
    pub states: Vec<State>,
    /// Index of the recovery state for total functional count `T` (`T-1` slot).
    pub(crate) rec_idx: Vec<usize>,
    /// Index of up state `(a, s)` at `up_idx[a-1][s]`; `None` once eliminated.
    pub(crate) up_idx: Vec<Vec<Option<usize>>>,
}

impl StateSpace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn down(&self) -> usize {
        0
    }

    pub fn rec(&self, total: usize) -> usize {
        self.rec_idx[total - 1]
    }

    pub fn up(&self, a: usize, s: usize) -> Option<usize> {
        self.up_idx[a - 1][s]
    }

    pub fn up_count(&self) -> usize {
        self.states
            .iter()
            .filter(|st| matches!(st, State::Up { .. }))
            .count()
    }
}

/// Which representative recovery cost stands in for the incoming-configuration
/// dependent `R[k][l]` of a recovery state onto `a` processors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPolicy {
    /// Mean over source configurations `k` of `recov[k][a]`.
    MeanIn,
    /// Max over source configurations `k` of `recov[k][a]`.
    MaxIn,
}

impl std::str::FromStr for DeltaPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_in" => Ok(DeltaPolicy::MeanIn),
            "max_in" => Ok(DeltaPolicy::MaxIn),
            other => Err(Error::InvalidArg(format!("unknown delta policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for DeltaPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DeltaPolicy::MeanIn => write!(f, "mean_in"),
            DeltaPolicy::MaxIn => write!(f, "max_in"),
        }
    }
}

/// The assembled chain: transition probabilities `p` and the expected uptime /
/// downtime / useful-work weights per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct MalleableChain {
    pub space: StateSpace,
    pub p: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub interval: f64,
    pub lambda: f64,
    pub theta: f64,
    pub delta_policy: DeltaPolicy,
    /// Up states removed by [`eliminate_states`].
    pub elims: usize,
}

/// Stationary distribution of the chain's transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    pub pi: DVector<f64>,
}

/// Enumerates the state space for `n` processors under a rescheduling policy.
pub fn enumerate_states(n: usize, rp: &RpVector) -> StateSpace {
    assert_eq!(rp.n, n);
    let mut states = vec![State::Down];
    let mut rec_idx = Vec::with_capacity(n);
    for total in 1..=n {
        let a = rp.at(total);
        rec_idx.push(states.len());
        states.push(State::Recovery { a, s: total - a });
    }
    let mut up_idx = vec![Vec::new(); n];
    for a in 1..=n {
        up_idx[a - 1] = vec![None; n - a + 1];
        for s in 0..=(n - a) {
            up_idx[a - 1][s] = Some(states.len());
            states.push(State::Up { a, s });
        }
    }
    StateSpace { n, states, rec_idx, up_idx }
}

/// Representative recovery cost for recovering onto `a` processors.
fn representative_recovery(profile: &AppProfile, n: usize, a: usize, policy: DeltaPolicy) -> f64 {
    let column = (1..=n).map(|k| profile.recov_at(k, a));
    match policy {
        DeltaPolicy::MeanIn => column.sum::<f64>() / n as f64,
        DeltaPolicy::MaxIn => column.fold(0.0_f64, f64::max),
    }
}

/// Per-active-count spare matrices; the unit of parallel work.
struct ActiveBlock {
    a: usize,
    delta: f64,
    transient: SpareMatrix,
    up_weighted: SpareMatrix,
    rec_weighted: SpareMatrix,
}

/// Builds the chain for `n` processors.
///
/// Spare matrices for different active counts are independent, so they are
/// computed in parallel; assembly is sequential and deterministic.
pub fn build_chain(
    n: usize,
    rp: &RpVector,
    profile: &AppProfile,
    lambda: f64,
    theta: f64,
    interval: f64,
    delta_policy: DeltaPolicy,
) -> Result<MalleableChain> {
    if rp.n != n {
        return Err(Error::Chain(format!("rp covers {} processors, need {n}", rp.n)));
    }
    rp.validate()?;
    profile.validate()?;
    if profile.n_max < n {
        return Err(Error::Chain(format!(
            "profile covers {} processors, need {n}",
            profile.n_max
        )));
    }
    if !(interval > 0.0 && lambda > 0.0 && theta > 0.0) {
        return Err(Error::Chain("interval and rates must be positive".into()));
    }

    let blocks: Vec<ActiveBlock> = (1..=n)
        .into_par_iter()
        .map(|a| -> Result<ActiveBlock> {
            let s_cap = n - a;
            let gen = build_generator(s_cap, lambda, theta);
            let rho = a as f64 * lambda;
            let delta = representative_recovery(profile, n, a, delta_policy)
                + interval
                + profile.ckpt_at(a);
            Ok(ActiveBlock {
                a,
                delta,
                transient: transient_probs(&gen, delta)?,
                up_weighted: failure_weighted_probs(&gen, rho)?,
                rec_weighted: conditioned_probs(&gen, rho, delta)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let space = enumerate_states(n, rp);
    let dim = space.len();
    let mut p = DMatrix::zeros(dim, dim);
    let mut u = DMatrix::zeros(dim, dim);
    let mut d = DMatrix::zeros(dim, dim);

    // down -> first recovery state; expected wait is the first repair among n
    let down = space.down();
    p[(down, space.rec(1))] = 1.0;
    d[(down, space.rec(1))] = 1.0 / (n as f64 * theta);

    for block in &blocks {
        let a = block.a;
        let s_cap = n - a;
        let rho = a as f64 * lambda;
        let ckpt = profile.ckpt_at(a);
        let no_fail = (-rho * block.delta).exp();
        let fail = -(-rho * block.delta).exp_m1();
        // mean failure time conditioned on failing within delta
        let d_fail = 1.0 / rho - block.delta * no_fail / fail;
        let d_recover = block.delta - interval;

        // up rows: exit only on active failure after Exp(rho) time; credit the
        // completed checkpoint cycles, the rest of the sojourn is downtime
        let cycles = 1.0 / (rho * (interval + ckpt)).exp_m1();
        let u_up = interval * cycles;
        let d_up = 1.0 / rho - u_up;
        for s1 in 0..=s_cap {
            let row = space.up(a, s1).unwrap();
            for s2 in 0..=s_cap {
                let prob = block.up_weighted.m[(s_cap - s1, s_cap - s2)];
                if prob == 0.0 {
                    continue;
                }
                let total = a - 1 + s2;
                let col = if total == 0 { down } else { space.rec(total) };
                p[(row, col)] += prob;
                u[(row, col)] = u_up;
                d[(row, col)] = d_up;
            }
        }

        // recovery rows whose policy choice is `a`
        for total in 1..=n {
            if rp.at(total) != a {
                continue;
            }
            let s1 = total - a;
            let row = space.rec(total);
            for s2 in 0..=s_cap {
                let prob = no_fail * block.transient.m[(s_cap - s1, s_cap - s2)];
                if prob > 0.0 {
                    let col = space.up(a, s2).unwrap();
                    p[(row, col)] += prob;
                    u[(row, col)] = interval;
                    d[(row, col)] = d_recover;
                }
                let prob = fail * block.rec_weighted.m[(s_cap - s1, s_cap - s2)];
                if prob > 0.0 {
                    let t2 = a - 1 + s2;
                    let col = if t2 == 0 { down } else { space.rec(t2) };
                    p[(row, col)] += prob;
                    u[(row, col)] = 0.0;
                    d[(row, col)] = d_fail;
                }
            }
        }
    }

    let w = work_matrix(&space, profile, &u);
    let chain = MalleableChain {
        space,
        p,
        u,
        d,
        w,
        interval,
        lambda,
        theta,
        delta_policy,
        elims: 0,
    };
    chain.check()?;
    Ok(chain)
}

/// `w[i][j] = work[a(i)] * u[i][j]` with the source state's active count.
fn work_matrix(space: &StateSpace, profile: &AppProfile, u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = u.clone();
    for (i, st) in space.states.iter().enumerate() {
        let rate = match st {
            State::Down => 0.0,
            State::Recovery { a, .. } | State::Up { a, .. } => profile.work_at(*a),
        };
        for j in 0..space.len() {
            w[(i, j)] *= rate;
        }
    }
    w
}

impl MalleableChain {
    /// Verifies stochasticity and weight-sign invariants.
    pub fn check(&self) -> Result<()> {
        let dim = self.space.len();
        for i in 0..dim {
            let mut sum = 0.0;
            for j in 0..dim {
                let pr = self.p[(i, j)];
                if !(pr >= 0.0 && pr.is_finite()) {
                    return Err(Error::Chain(format!("p[{i}][{j}] = {pr}")));
                }
                if self.u[(i, j)] < 0.0 || self.d[(i, j)] < 0.0 || self.w[(i, j)] < 0.0 {
                    return Err(Error::Chain(format!("negative weight at ({i},{j})")));
                }
                sum += pr;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Chain(format!("row {i} of p sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Removes up states whose every incoming transition probability is below
/// `thres`; the lost outgoing mass of each remaining row is redistributed
/// proportionally over its surviving targets.
pub fn eliminate_states(chain: &MalleableChain, thres: f64) -> Result<MalleableChain> {
    assert!((0.0..1.0).contains(&thres));
    let dim = chain.space.len();
    let mut keep = vec![true; dim];
    for (j, st) in chain.space.states.iter().enumerate() {
        if !matches!(st, State::Up { .. }) {
            continue;
        }
        let max_in = (0..dim).map(|i| chain.p[(i, j)]).fold(0.0_f64, f64::max);
        if max_in < thres {
            keep[j] = false;
        }
    }
    let elims = keep.iter().filter(|&&k| !k).count();
    if elims == 0 {
        let mut out = chain.clone();
        out.elims = 0;
        return Ok(out);
    }

    let old_to_new: Vec<Option<usize>> = {
        let mut next = 0usize;
        keep.iter()
            .map(|&k| {
                if k {
                    let idx = next;
                    next += 1;
                    Some(idx)
                } else {
                    None
                }
            })
            .collect()
    };
    let new_dim = dim - elims;

    // renormalization factors: rows must retain positive mass
    let mut scale = vec![0.0; dim];
    for i in 0..dim {
        if !keep[i] {
            continue;
        }
        let kept_mass: f64 = (0..dim).filter(|&j| keep[j]).map(|j| chain.p[(i, j)]).sum();
        if kept_mass <= 1e-12 {
            return Err(Error::EliminationEmptyRow { thres });
        }
        scale[i] = 1.0 / kept_mass;
    }

    let mut p = DMatrix::zeros(new_dim, new_dim);
    let mut u = DMatrix::zeros(new_dim, new_dim);
    let mut d = DMatrix::zeros(new_dim, new_dim);
    let mut w = DMatrix::zeros(new_dim, new_dim);
    for i in 0..dim {
        let Some(ni) = old_to_new[i] else { continue };
        for j in 0..dim {
            let Some(nj) = old_to_new[j] else { continue };
            p[(ni, nj)] = chain.p[(i, j)] * scale[i];
            u[(ni, nj)] = chain.u[(i, j)];
            d[(ni, nj)] = chain.d[(i, j)];
            w[(ni, nj)] = chain.w[(i, j)];
        }
    }

    let states: Vec<State> = chain
        .space
        .states
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(st, _)| *st)
        .collect();
    let rec_idx = chain
        .space
        .rec_idx
        .iter()
        .map(|&i| old_to_new[i].expect("recovery states are never eliminated"))
        .collect();
    let up_idx = chain
        .space
        .up_idx
        .iter()
        .map(|row| {
            row.iter()
                .map(|slot| slot.and_then(|i| old_to_new[i]))
                .collect()
        })
        .collect();
    let space = StateSpace { n: chain.space.n, states, rec_idx, up_idx };

    let reduced = MalleableChain {
        space,
        p,
        u,
        d,
        w,
        interval: chain.interval,
        lambda: chain.lambda,
        theta: chain.theta,
        delta_policy: chain.delta_policy,
        elims,
    };
    reduced.check()?;
    Ok(reduced)
}

/// Solves `pi = pi * P` with the normalization constraint by dense LU on the
/// transposed system with one equation replaced by `sum(pi) = 1`.
pub fn stationary(chain: &MalleableChain) -> Result<StationaryDist> {
    let dim = chain.space.len();
    let mut a = chain.p.transpose() - DMatrix::identity(dim, dim);
    for c in 0..dim {
        a[(dim - 1, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(dim);
    rhs[dim - 1] = 1.0;
    let mut pi = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Stationary("singular system (reducible chain?)".into()))?;

    for v in pi.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-9 {
                return Err(Error::Stationary(format!("negative probability {v}")));
            }
            *v = 0.0;
        }
    }
    let sum: f64 = pi.iter().sum();
    pi /= sum;

    let residual: f64 = (pi.transpose() * &chain.p - pi.transpose())
        .iter()
        .map(|v| v.abs())
        .sum();
    if residual > 1e-9 {
        return Err(Error::Stationary(format!("residual {residual} > 1e-9")));
    }
    Ok(StationaryDist { pi })
}

/// Useful work per unit time:
/// `sum W_ij pi_i P_ij / sum (U_ij + D_ij) pi_i P_ij`.
pub fn uwt(chain: &MalleableChain, dist: &StationaryDist) -> Result<f64> {
    let dim = chain.space.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..dim {
        let pi = dist.pi[i];
        if pi == 0.0 {
            continue;
        }
        for j in 0..dim {
            let joint = pi * chain.p[(i, j)];
            num += chain.w[(i, j)] * joint;
            den += (chain.u[(i, j)] + chain.d[(i, j)]) * joint;
        }
    }
    if !(den > 0.0) {
        return Err(Error::Chain("zero expected transition time".into()));
    }
    Ok(num / den)
}

/// Score for a candidate elimination threshold: accuracy term plus the
/// fraction of up states removed.
pub fn threshold_score(
    full_uwt: f64,
    reduced_uwt: f64,
    elims: usize,
    up_count: usize,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    if !(full_uwt > 0.0) {
        return Err(Error::InvalidArg(format!("full UWT {full_uwt} must be positive")));
    }
    if up_count == 0 || alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArg("up_count must be positive, weights >= 0".into()));
    }
    let threserror = ((full_uwt - reduced_uwt).abs() / full_uwt).clamp(0.0, 1.0);
    Ok(alpha * (1.0 - threserror) + beta * (elims as f64 / up_count as f64))
}

/// Debug dump: state list plus the four matrices, row-major, full precision.
pub fn dump_json(chain: &MalleableChain) -> String {
    #[derive(Serialize)]
    struct Dump<'a> {
        n: usize,
        interval_s: f64,
        states: &'a [State],
        p: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
        w: Vec<Vec<f64>>,
    }
    let rows = |m: &DMatrix<f64>| {
        (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect()
    };
    serde_json::to_string_pretty(&Dump {
        n: chain.space.n,
        interval_s: chain.interval,
        states: &chain.space.states,
        p: rows(&chain.p),
        u: rows(&chain.u),
        d: rows(&chain.d),
        w: rows(&chain.w),
    })
    .expect("chain dump serialization")
}
