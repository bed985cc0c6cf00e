//! Evaluation grid and the cumulative-incidence prediction contract.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Strictly increasing positive time points `t_1 < … < t_K` (months).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::Config("time grid must have at least one point".into()));
        }
        if points[0] <= 0.0 || !points.iter().all(|t| t.is_finite()) {
            return Err(CoreError::Config("time grid points must be finite and positive".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::Config("time grid must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// `k` evenly spaced points ending at `horizon`.
    pub fn uniform(horizon: f64, k: usize) -> Result<Self> {
        if k == 0 || horizon <= 0.0 {
            return Err(CoreError::Config("uniform grid needs k >= 1 and a positive horizon".into()));
        }
        Self::new((1..=k).map(|i| horizon * i as f64 / k as f64).collect())
    }

    /// Up to `k` distinct empirical quantiles of `times` (duplicates collapse).
    pub fn quantiles(times: &[f64], k: usize) -> Result<Self> {
        let mut v: Vec<f64> = times.iter().copied().filter(|t| *t > 0.0 && t.is_finite()).collect();
        if v.is_empty() || k == 0 {
            return Err(CoreError::Data("cannot build a quantile grid without positive times".into()));
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mut pts: Vec<f64> = (1..=k)
            .map(|i| {
                let pos = (i as f64 / k as f64) * (n - 1) as f64;
                v[pos.round() as usize]
            })
            .collect();
        pts.dedup();
        Self::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.points.last().expect("nonempty grid")
    }

    /// Bin of a time: the smallest `k` with `t <= t_k`, or `None` past the horizon.
    pub fn bin(&self, t: f64) -> Option<usize> {
        let k = self.points.partition_point(|&p| p < t);
        (k < self.points.len()).then_some(k)
    }

    /// Index of the largest grid point `<= t`, if any.
    pub fn floor_index(&self, t: f64) -> Option<usize> {
        self.points.partition_point(|&p| p <= t).checked_sub(1)
    }
}

/// Per-cause cumulative incidence `F_c(t_k)`; `values[c][k]` is cause `c + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CifCurve {
    pub values: Vec<Vec<f64>>,
}

impl CifCurve {
    pub fn n_causes(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `F_cause(t_k)` with 1-based cause.
    pub fn at(&self, cause: usize, k: usize) -> f64 {
        self.values[cause - 1][k]
    }

    /// Value at the final grid point for a 1-based cause.
    pub fn last(&self, cause: usize) -> f64 {
        *self.values[cause - 1].last().expect("nonempty curve")
    }

    /// Overall event-free probability at each grid point.
    pub fn survival(&self) -> Vec<f64> {
        (0..self.len()).map(|k| 1.0 - self.values.iter().map(|v| v[k]).sum::<f64>()).collect()
    }

    /// Checks range, per-cause monotonicity and total mass; returns a description of the first violation.
    pub fn violation(&self, tol: f64) -> Option<String> {
        for (c, v) in self.values.iter().enumerate() {
            for (k, &x) in v.iter().enumerate() {
                if !(x >= -tol && x <= 1.0 + tol) {
                    return Some(format!("cause {} at k={k}: value {x} outside [0, 1]", c + 1));
                }
                if k > 0 && x < v[k - 1] - tol {
                    return Some(format!("cause {} decreases at k={k}", c + 1));
                }
            }
        }
        for k in 0..self.len() {
            let s: f64 = self.values.iter().map(|v| v[k]).sum();
            if s > 1.0 + tol {
                return Some(format!("total incidence {s} exceeds 1 at k={k}"));
            }
        }
        None
    }

    /// Right-continuous resampling onto another grid (zero before the first point).
    pub fn resample(&self, from: &TimeGrid, to: &TimeGrid) -> CifCurve {
        let values = self
            .values
            .iter()
            .map(|v| to.points().iter().map(|&t| from.floor_index(t).map_or(0.0, |k| v[k])).collect())
            .collect();
        CifCurve { values }
    }
}

/// Turns arbitrary per-cause scores on a grid into a valid CIF.
///
/// Values are clamped to `[0, 1]`; at each grid point the positive
/// increments over the running curve are kept and, if together they would
/// push the total incidence above one, scaled down to the remaining mass.
/// Already-valid input is returned unchanged.
pub fn project_cif(raw: &[Vec<f64>]) -> CifCurve {
    let c = raw.len();
    let k = raw.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; k]; c];
    let mut prev = vec![0.0; c];
    for j in 0..k {
        let incs: Vec<f64> = (0..c)
            .map(|i| {
                let x = if raw[i][j].is_nan() { 0.0 } else { raw[i][j].clamp(0.0, 1.0) };
                (x - prev[i]).max(0.0)
            })
            .collect();
        let total: f64 = incs.iter().sum();
        let remaining = (1.0 - prev.iter().sum::<f64>()).max(0.0);
        let s = if total > remaining { remaining / total } else { 1.0 };
        for i in 0..c {
            prev[i] += incs[i] * s;
            out[i][j] = prev[i];
        }
    }
    CifCurve { values: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_follow_left_open_intervals() {
        let g = TimeGrid::new(vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(g.bin(0.5), Some(0));
        assert_eq!(g.bin(1.0), Some(0));
        assert_eq!(g.bin(1.5), Some(1));
        assert_eq!(g.bin(4.0), Some(2));
        assert_eq!(g.bin(4.5), None);
        assert_eq!(g.floor_index(0.5), None);
        assert_eq!(g.floor_index(2.0), Some(1));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(vec![]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn projection_is_identity_on_valid_curves() {
        let raw = vec![vec![0.1, 0.2, 0.3], vec![0.0, 0.3, 0.5]];
        assert_eq!(project_cif(&raw).values, raw);
    }

    #[test]
    fn projection_repairs_violations() {
        let raw = vec![vec![0.4, 0.3, 1.4], vec![0.5, 0.9, f64::NAN]];
        let c = project_cif(&raw);
        assert!(c.violation(1e-12).is_none(), "{:?}", c);
        assert!((c.last(1) + c.last(2) - 1.0).abs() < 1e-12);
    }
}
