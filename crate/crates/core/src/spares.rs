//! Birth-death CTMC over spare processors: generator construction, transient
//! probabilities and failure-time-weighted transition likelihood matrices.
//!
//! Matrices are indexed the same way throughout: row/column `r` corresponds
//! to `s_cap - r` functional spares, so row 0 is the all-spares state.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Generator of the spare birth-death chain for `s_cap` maximum spares.
///
/// From `s` functional spares the chain moves to `s-1` at rate `s * lambda`
/// and to `s+1` at rate `(s_cap - s) * theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpareGenerator {
    pub s_cap: usize,
    pub lambda: f64,
    pub theta: f64,
    pub q: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpareMatrixTag {
    Transient,
    UpWeighted,
    RecWeighted,
}

/// A row-stochastic matrix of spare-count transition probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SpareMatrix {
    pub m: DMatrix<f64>,
    pub tag: SpareMatrixTag,
}

impl SpareGenerator {
    /// Row/column index of the state with `s` functional spares.
    pub fn idx(&self, s: usize) -> usize {
        self.s_cap - s
    }
}

impl SpareMatrix {
    /// Probability of moving from `s1` to `s2` functional spares.
    pub fn prob(&self, g: &SpareGenerator, s1: usize, s2: usize) -> f64 {
        self.m[(g.idx(s1), g.idx(s2))]
    }
}

/// Builds the tridiagonal birth-death generator; `s_cap = 0` gives `[[0]]`.
pub fn build_generator(s_cap: usize, lambda: f64, theta: f64) -> SpareGenerator {
    assert!(lambda > 0.0 && theta > 0.0);
    let dim = s_cap + 1;
    let mut q = DMatrix::zeros(dim, dim);
    for s in 0..=s_cap {
        let r = s_cap - s;
        if s > 0 {
            q[(r, s_cap - (s - 1))] = s as f64 * lambda;
        }
        if s < s_cap {
            q[(r, s_cap - (s + 1))] = (s_cap - s) as f64 * theta;
        }
        q[(r, r)] = -(s as f64 * lambda + (s_cap - s) as f64 * theta);
    }
    SpareGenerator { s_cap, lambda, theta, q }
}

/// Probabilities of spare-count transitions over `tau` seconds,
/// the matrix exponential of the generator scaled by `tau`.
pub fn transient_probs(g: &SpareGenerator, tau: f64) -> Result<SpareMatrix> {
    assert!(tau >= 0.0);
    let m = (g.q.clone() * tau).exp();
    finish(m, SpareMatrixTag::Transient)
}

/// Spare-count transition likelihoods weighted by an Exponential(`a_lambda`)
/// time to failure over `[0, inf)`: the closed form
/// `a_lambda * (a_lambda I - q)^-1`.
pub fn failure_weighted_probs(g: &SpareGenerator, a_lambda: f64) -> Result<SpareMatrix> {
    assert!(a_lambda > 0.0);
    let dim = g.s_cap + 1;
    let shifted = DMatrix::identity(dim, dim) * a_lambda - &g.q;
    let inv = shifted
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("a_lambda*I - q is singular".into()))?;
    finish(inv * a_lambda, SpareMatrixTag::UpWeighted)
}

/// Like [`failure_weighted_probs`] but with the failure time conditioned on
/// landing inside `[0, delta]`.
///
/// With `B = (q - a_lambda I) delta` the integral collapses to
/// `a_lambda delta / (1 - e^{-a_lambda delta}) * phi1(B)` where
/// `phi1(B) = sum B^k / (k+1)!`; computing `phi1` through an augmented matrix
/// exponential keeps tiny `a_lambda * delta` stable.
pub fn conditioned_probs(g: &SpareGenerator, a_lambda: f64, delta: f64) -> Result<SpareMatrix> {
    assert!(a_lambda > 0.0 && delta > 0.0);
    let dim = g.s_cap + 1;
    let b = (g.q.clone() - DMatrix::identity(dim, dim) * a_lambda) * delta;
    // expm([[B, I], [0, 0]]) has phi1(B) as its top-right block
    let mut aug = DMatrix::zeros(2 * dim, 2 * dim);
    aug.view_mut((0, 0), (dim, dim)).copy_from(&b);
    aug.view_mut((0, dim), (dim, dim))
        .copy_from(&DMatrix::identity(dim, dim));
    let phi1 = aug.exp().view((0, dim), (dim, dim)).into_owned();
    // denominator via expm1 for the same stability
    let denom = -(-a_lambda * delta).exp_m1();
    let m = phi1 * (a_lambda * delta / denom);
    finish(m, SpareMatrixTag::RecWeighted)
}

/// Checks row-stochasticity (1e-9) and entry sign (>= -1e-12), clips
/// floating-point noise to zero and renormalizes each row.
fn finish(mut m: DMatrix<f64>, tag: SpareMatrixTag) -> Result<SpareMatrix> {
    let dim = m.nrows();
    for r in 0..dim {
        let mut sum = 0.0;
        for c in 0..dim {
            let v = m[(r, c)];
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite entry at ({r},{c})")));
            }
            if v < -1e-12 {
                return Err(Error::Numerical(format!(
                    "negative probability {v} at ({r},{c})"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numerical(format!("row {r} sums to {sum}")));
        }
        let mut clipped = 0.0;
        for c in 0..dim {
            if m[(r, c)] < 0.0 {
                m[(r, c)] = 0.0;
            }
            clipped += m[(r, c)];
        }
        for c in 0..dim {
            m[(r, c)] /= clipped;
        }
    }
    Ok(SpareMatrix { m, tag })
}
