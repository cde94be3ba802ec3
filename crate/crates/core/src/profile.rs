//! Application profiles: per-configuration work rate, checkpoint overhead and
//! recovery cost, with least-squares power-law extrapolation from benchmark
//! points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-configuration application characteristics.
///
/// Vectors are indexed by processor count `a` in `1..=n_max` (slot 0 of the
/// stored vec is `a = 1`). `recov[k-1][l-1]` is the cost of recovering from a
/// `k`-processor checkpoint onto `l` processors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub n_max: usize,
    pub work: Vec<f64>,
    pub ckpt: Vec<f64>,
    pub recov: Vec<Vec<f64>>,
}

impl AppProfile {
    pub fn work_at(&self, a: usize) -> f64 {
        self.work[a - 1]
    }

    pub fn ckpt_at(&self, a: usize) -> f64 {
        self.ckpt[a - 1]
    }

    pub fn recov_at(&self, k: usize, l: usize) -> f64 {
        self.recov[k - 1][l - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_max;
        if n == 0 {
            return Err(Error::Profile("n_max must be positive".into()));
        }
        if self.work.len() != n {
            return Err(Error::Profile(format!(
                "work has length {}, expected n_max={n}",
                self.work.len()
            )));
        }
        if self.ckpt.len() != n {
            return Err(Error::Profile(format!(
                "ckpt has length {}, expected n_max={n}",
                self.ckpt.len()
            )));
        }
        if self.recov.len() != n || self.recov.iter().any(|r| r.len() != n) {
            return Err(Error::Profile(format!("recov must be {n}x{n}")));
        }
        for (i, &w) in self.work.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Profile(format!("work[{}] = {w} must be positive", i + 1)));
            }
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.ckpt.iter().copied().all(nonneg) {
            return Err(Error::Profile("ckpt entries must be finite and >= 0".into()));
        }
        if !self.recov.iter().flatten().copied().all(nonneg) {
            return Err(Error::Profile("recov entries must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Which table a benchmark measurement belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BenchmarkPoint {
    Work { a: usize, value: f64 },
    Ckpt { a: usize, value: f64 },
    Recov { k: usize, l: usize, value: f64 },
}

/// Extrapolation model for filling unmeasured configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    /// Log-space linear least squares of `v(a) = c * a^b`.
    PowerLaw,
    /// Nearest measured configuration's value.
    ConstantFill,
}

/// Builds a full profile from sparse benchmark points.
///
/// Work and checkpoint vectors are filled for `1..=n_max` by the chosen
/// model; the recovery matrix is fit as `R(k,l) = c * (k+l)^b` when at least
/// two points exist, else filled with the constant mean of supplied points,
/// else with `recov_default`. Measured points are preserved exactly.
pub fn fit_profile(
    points: &[BenchmarkPoint],
    n_max: usize,
    model: FitModel,
    recov_default: Option<f64>,
) -> Result<AppProfile> {
    if n_max == 0 {
        return Err(Error::Fit("n_max must be positive".into()));
    }
    let mut work_pts = Vec::new();
    let mut ckpt_pts = Vec::new();
    let mut recov_pts = Vec::new();
    for p in points {
        match *p {
            BenchmarkPoint::Work { a, value } => {
                if !(value > 0.0) {
                    return Err(Error::Fit(format!("work point at a={a} must be positive")));
                }
                check_cfg(a, n_max)?;
                work_pts.push((a as f64, value));
            }
            BenchmarkPoint::Ckpt { a, value } => {
                check_cfg(a, n_max)?;
                check_nonneg(value)?;
                ckpt_pts.push((a as f64, value));
            }
            BenchmarkPoint::Recov { k, l, value } => {
                check_cfg(k, n_max)?;
                check_cfg(l, n_max)?;
                check_nonneg(value)?;
                recov_pts.push((k, l, value));
            }
        }
    }
    if work_pts.iter().map(|p| p.0 as usize).collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(Error::Fit("need work points at >= 2 distinct processor counts".into()));
    }
    if ckpt_pts.is_empty() {
        return Err(Error::Fit("need at least one ckpt point".into()));
    }

    let work = fill_vector(&work_pts, n_max, model);
    let ckpt = fill_vector(&ckpt_pts, n_max, model);

    let mut recov = vec![vec![0.0; n_max]; n_max];
    if recov_pts.len() >= 2
        && recov_pts
            .iter()
            .map(|&(k, l, _)| k + l)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
            >= 2
    {
        let pts: Vec<(f64, f64)> = recov_pts.iter().map(|&(k, l, v)| ((k + l) as f64, v)).collect();
        let f = power_law_or_constant(&pts);
        for k in 1..=n_max {
            for l in 1..=n_max {
                recov[k - 1][l - 1] = f((k + l) as f64);
            }
        }
    } else if !recov_pts.is_empty() {
        let mean = recov_pts.iter().map(|p| p.2).sum::<f64>() / recov_pts.len() as f64;
        for row in &mut recov {
            row.fill(mean);
        }
    } else {
        let d = recov_default.ok_or_else(|| {
            Error::Fit("no recov points and no recov_default supplied".into())
        })?;
        check_nonneg(d)?;
        for row in &mut recov {
            row.fill(d);
        }
    }
    // measured points win over any fitted value
    for &(k, l, v) in &recov_pts {
        recov[k - 1][l - 1] = v;
    }

    let profile = AppProfile { n_max, work, ckpt, recov };
    profile.validate()?;
    Ok(profile)
}

fn check_cfg(a: usize, n_max: usize) -> Result<()> {
    if a == 0 || a > n_max {
        return Err(Error::Fit(format!("config {a} outside 1..={n_max}")));
    }
    Ok(())
}

fn check_nonneg(v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Fit(format!("value {v} must be finite and >= 0")));
    }
    Ok(())
}

fn fill_vector(pts: &[(f64, f64)], n_max: usize, model: FitModel) -> Vec<f64> {
    let f: Box<dyn Fn(f64) -> f64> = match model {
        FitModel::PowerLaw => power_law_or_constant(pts),
        FitModel::ConstantFill => nearest_fill(pts),
    };
    let mut out: Vec<f64> = (1..=n_max).map(|a| f(a as f64)).collect();
    for &(a, v) in pts {
        out[a as usize - 1] = v;
    }
    out
}

/// Least-squares fit of `v = c * x^b` in log space; degenerates to a nearest
/// fill when the points cannot support a power law (identical x, zero values).
fn power_law_or_constant(pts: &[(f64, f64)]) -> Box<dyn Fn(f64) -> f64> {
    let usable: Vec<(f64, f64)> = pts
        .iter()
        .copied()
        .filter(|&(x, v)| x > 0.0 && v > 0.0)
        .collect();
    let distinct_x = usable
        .iter()
        .map(|p| p.0.to_bits())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if usable.len() < 2 || distinct_x < 2 {
        return nearest_fill(pts);
    }
    let n = usable.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, v) in &usable {
        let lx = x.ln();
        let ly = v.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return nearest_fill(pts);
    }
    let b = (n * sxy - sx * sy) / denom;
    let ln_c = (sy - b * sx) / n;
    let c = ln_c.exp();
    Box::new(move |x: f64| c * x.powf(b))
}

fn nearest_fill(pts: &[(f64, f64)]) -> Box<dyn Fn(f64) -> f64> {
    let pts = pts.to_vec();
    Box::new(move |x: f64| {
        pts.iter()
            .min_by(|a, b| {
                ((a.0 - x).abs(), a.0)
                    .partial_cmp(&((b.0 - x).abs(), b.0))
                    .unwrap()
            })
            .map(|p| p.1)
            .unwrap_or(0.0)
    })
}

/// Parses the profile JSON schema and enforces invariants.
pub fn load_profile(text: &str) -> Result<AppProfile> {
    let p: AppProfile = serde_json::from_str(text)?;
    p.validate()?;
    Ok(p)
}

/// Serializes a profile to its JSON schema.
pub fn save_profile(p: &AppProfile) -> Result<String> {
    p.validate()?;
    Ok(serde_json::to_string_pretty(p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn power_law_exact_linear() {
        let pts = [
            BenchmarkPoint::Work { a: 1, value: 2.0 },
            BenchmarkPoint::Work { a: 2, value: 4.0 },
            BenchmarkPoint::Ckpt { a: 1, value: 1.0 },
        ];
        let p = fit_profile(&pts, 4, FitModel::PowerLaw, Some(0.0)).unwrap();
        for (a, want) in [(1, 2.0), (2, 4.0), (3, 6.0), (4, 8.0)] {
            assert_relative_eq!(p.work_at(a), want, max_relative = 1e-9);
        }
    }

    #[test]
    fn constant_fill_single_ckpt_point() {
        let pts = [
            BenchmarkPoint::Work { a: 1, value: 1.0 },
            BenchmarkPoint::Work { a: 2, value: 2.0 },
            BenchmarkPoint::Ckpt { a: 2, value: 9.55 },
        ];
        let p = fit_profile(&pts, 4, FitModel::ConstantFill, Some(0.0)).unwrap();
        for a in 1..=4 {
            assert_relative_eq!(p.ckpt_at(a), 9.55);
        }
    }

    #[test]
    fn power_law_extrapolation_accuracy() {
        let truth = |a: f64| 3.0 * a.powf(0.8);
        let mut pts: Vec<BenchmarkPoint> = [1, 2, 4, 8]
            .iter()
            .map(|&a| BenchmarkPoint::Work { a, value: truth(a as f64) })
            .collect();
        pts.push(BenchmarkPoint::Ckpt { a: 1, value: 5.0 });
        let p = fit_profile(&pts, 16, FitModel::PowerLaw, Some(0.0)).unwrap();
        let want = truth(16.0);
        assert!((p.work_at(16) - want).abs() / want < 0.01);
    }

    #[test]
    fn measured_points_preserved_exactly() {
        let pts = [
            BenchmarkPoint::Work { a: 1, value: 2.0 },
            BenchmarkPoint::Work { a: 3, value: 5.1 },
            BenchmarkPoint::Ckpt { a: 2, value: 7.0 },
            BenchmarkPoint::Recov { k: 1, l: 2, value: 3.5 },
            BenchmarkPoint::Recov { k: 2, l: 2, value: 4.25 },
        ];
        let p = fit_profile(&pts, 4, FitModel::PowerLaw, None).unwrap();
        assert_eq!(p.work_at(1), 2.0);
        assert_eq!(p.work_at(3), 5.1);
        assert_eq!(p.ckpt_at(2), 7.0);
        assert_eq!(p.recov_at(1, 2), 3.5);
        assert_eq!(p.recov_at(2, 2), 4.25);
    }

    #[test]
    fn power_law_scale_consistent() {
        let base = [
            BenchmarkPoint::Work { a: 1, value: 2.0 },
            BenchmarkPoint::Work { a: 4, value: 5.0 },
            BenchmarkPoint::Ckpt { a: 1, value: 1.0 },
        ];
        let scaled = [
            BenchmarkPoint::Work { a: 1, value: 6.0 },
            BenchmarkPoint::Work { a: 4, value: 15.0 },
            BenchmarkPoint::Ckpt { a: 1, value: 1.0 },
        ];
        let p = fit_profile(&base, 8, FitModel::PowerLaw, Some(0.0)).unwrap();
        let q = fit_profile(&scaled, 8, FitModel::PowerLaw, Some(0.0)).unwrap();
        for a in 1..=8 {
            assert_relative_eq!(q.work_at(a), 3.0 * p.work_at(a), max_relative = 1e-9);
        }
    }

    #[test]
    fn insufficient_points_rejected() {
        let pts = [
            BenchmarkPoint::Work { a: 2, value: 4.0 },
            BenchmarkPoint::Ckpt { a: 1, value: 1.0 },
        ];
        assert!(fit_profile(&pts, 4, FitModel::PowerLaw, Some(0.0)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let pts = [
            BenchmarkPoint::Work { a: 1, value: 2.0 },
            BenchmarkPoint::Work { a: 2, value: 4.0 },
            BenchmarkPoint::Ckpt { a: 1, value: 1.0 },
        ];
        let p = fit_profile(&pts, 3, FitModel::PowerLaw, Some(2.0)).unwrap();
        let text = save_profile(&p).unwrap();
        let q = load_profile(&text).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn length_mismatch_rejected() {
        let text = r#"{"n_max":3,"work":[1.0,2.0],"ckpt":[1,1,1],"recov":[[0,0,0],[0,0,0],[0,0,0]]}"#;
        assert!(load_profile(text).is_err());
    }

    #[test]
    fn qr_fixture_loads() {
        // checkpoint/recovery overhead ranges measured for a QR solver
        let text = r#"{
            "n_max": 4,
            "work": [1.0, 1.8, 2.5, 3.1],
            "ckpt": [91.90, 99.19, 110.0, 117.28],
            "recov": [[8.74, 12.0, 15.0, 17.0],
                      [12.0, 17.21, 20.0, 24.0],
                      [15.0, 20.0, 25.0, 29.0],
                      [17.0, 24.0, 29.0, 32.97]]
        }"#;
        let p = load_profile(text).unwrap();
        assert_eq!(p.n_max, 4);
        assert_relative_eq!(p.ckpt_at(4), 117.28);
        assert_relative_eq!(p.recov_at(1, 1), 8.74);
    }

    #[test]
    fn negative_entry_rejected() {
        let text =
            r#"{"n_max":1,"work":[1.0],"ckpt":[-1.0],"recov":[[0.0]]}"#;
        assert!(load_profile(text).is_err());
    }
}
