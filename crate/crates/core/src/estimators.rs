//! Kaplan–Meier, Aalen–Johansen, censoring survival and jackknife pseudo-values.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;

/// Right-continuous step function with jumps at strictly increasing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
}

impl StepFunction {
    pub fn constant(v: f64) -> Self {
        Self { times: Vec::new(), values: Vec::new(), initial: v }
    }

    /// Value at the largest jump `<= t`.
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    /// Left limit: value at the largest jump `< t`.
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.points().iter().map(|&t| self.eval(t)).collect()
    }
}

fn check_inputs(times: &[f64], n_labels: usize) -> Result<()> {
    if times.is_empty() {
        return Err(CoreError::Data("estimator called on an empty sample".into()));
    }
    if times.len() != n_labels {
        return Err(CoreError::Data(format!("{} times but {} labels", times.len(), n_labels)));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(CoreError::Data(format!("event times must be positive and finite, got {t}")));
    }
    Ok(())
}

fn sorted_order(times: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    idx
}

/// Product-limit survival estimate; ties grouped by identical time.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    check_inputs(times, events.len())?;
    let order = sorted_order(times);
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut out = StepFunction::constant(1.0);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut n_t) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            d += events[order[i]] as usize;
            n_t += 1;
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(s);
        }
        at_risk -= n_t;
    }
    Ok(out)
}

/// Censoring survival `Ĝ`: Kaplan–Meier with censoring (cause 0) as the event.
///
/// Events at a tied time are taken to occur before censorings, so they leave
/// the censoring risk set first.
pub fn censoring_survival(times: &[f64], causes: &[u8]) -> Result<StepFunction> {
    check_inputs(times, causes.len())?;
    let order = sorted_order(times);
    let mut at_risk = times.len();
    let mut g = 1.0;
    let mut out = StepFunction::constant(1.0);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut cens, mut n_t) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            cens += (causes[order[i]] == 0) as usize;
            n_t += 1;
            i += 1;
        }
        if cens > 0 {
            let events = n_t - cens;
            g *= 1.0 - cens as f64 / (at_risk - events) as f64;
            out.times.push(t);
            out.values.push(g);
        }
        at_risk -= n_t;
    }
    Ok(out)
}

/// Aalen–Johansen fit kept at its jump times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AalenJohansen {
    /// Distinct times with at least one event of any cause.
    pub times: Vec<f64>,
    /// `cif[c][j]`: incidence of cause `c + 1` just after `times[j]`.
    pub cif: Vec<Vec<f64>>,
    /// Overall survival just after `times[j]`.
    pub survival: Vec<f64>,
}

impl AalenJohansen {
    pub fn fit(times: &[f64], causes: &[u8], n_causes: usize) -> Result<Self> {
        check_inputs(times, causes.len())?;
        if let Some(&c) = causes.iter().find(|&&c| c as usize > n_causes) {
            return Err(CoreError::Data(format!("cause label {c} exceeds the {n_causes} declared causes")));
        }
        let order = sorted_order(times);
        Ok(Self::fit_sorted(times, causes, n_causes, &order, None))
    }

    /// Sweep over presorted indices, optionally skipping one subject.
    fn fit_sorted(times: &[f64], causes: &[u8], n_causes: usize, order: &[usize], skip: Option<usize>) -> Self {
        let mut at_risk = order.len() - skip.is_some() as usize;
        let mut s = 1.0;
        let mut acc = vec![0.0; n_causes];
        let mut out = AalenJohansen { times: Vec::new(), cif: vec![Vec::new(); n_causes], survival: Vec::new() };
        let mut d = vec![0usize; n_causes + 1];
        let mut i = 0;
        while i < order.len() {
            let t = times[order[i]];
            d.iter_mut().for_each(|x| *x = 0);
            let mut n_t = 0;
            while i < order.len() && times[order[i]] == t {
                if Some(order[i]) != skip {
                    d[causes[order[i]] as usize] += 1;
                    n_t += 1;
                }
                i += 1;
            }
            let events: usize = d[1..].iter().sum();
            if events > 0 {
                let n = at_risk as f64;
                for c in 0..n_causes {
                    acc[c] += s * d[c + 1] as f64 / n;
                    out.cif[c].push(acc[c]);
                }
                s *= 1.0 - events as f64 / n;
                out.times.push(t);
                out.survival.push(s);
            }
            at_risk -= n_t;
        }
        out
    }

    /// `F_c(t)` for a 1-based cause, right-continuous.
    pub fn cif_at(&self, cause: usize, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 0.0,
            k => self.cif[cause - 1][k - 1],
        }
    }

    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    /// Per-cause incidence on a grid: `out[c][k]`.
    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<Vec<f64>> {
        (1..=self.cif.len()).map(|c| grid.points().iter().map(|&t| self.cif_at(c, t)).collect()).collect()
    }

    pub fn step_function(&self, cause: usize) -> StepFunction {
        StepFunction { times: self.times.clone(), values: self.cif[cause - 1].clone(), initial: 0.0 }
    }
}

/// Aalen–Johansen cumulative incidence of causes `1..=n_causes` on a grid.
pub fn aalen_johansen(times: &[f64], causes: &[u8], n_causes: usize, grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    Ok(AalenJohansen::fit(times, causes, n_causes)?.on_grid(grid))
}

/// Jackknife pseudo-values of the per-cause incidence, `n × K × C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoValueMatrix {
    pub n: usize,
    pub n_causes: usize,
    pub grid: TimeGrid,
    values: Vec<f64>,
}

impl PseudoValueMatrix {
    /// Pseudo-value of subject `i` at grid index `k` for 1-based `cause`.
    pub fn get(&self, i: usize, k: usize, cause: usize) -> f64 {
        self.values[(i * self.grid.len() + k) * self.n_causes + cause - 1]
    }

    /// Row of subject `i` laid out cause-major: `[c1 k1..kK, c2 k1..kK, …]`.
    pub fn subject_row(&self, i: usize) -> Vec<f64> {
        let kk = self.grid.len();
        let mut row = Vec::with_capacity(kk * self.n_causes);
        for c in 1..=self.n_causes {
            row.extend((0..kk).map(|k| self.get(i, k, c)));
        }
        row
    }
}

/// `PV_i(t_k, c) = n·F̂_c(t_k) − (n−1)·F̂_c^{(−i)}(t_k)` by leave-one-out sweeps over a single sort.
pub fn jackknife_pseudo(times: &[f64], causes: &[u8], n_causes: usize, grid: &TimeGrid) -> Result<PseudoValueMatrix> {
    check_inputs(times, causes.len())?;
    let n = times.len();
    if n < 2 {
        return Err(CoreError::Data("pseudo-values need at least two subjects".into()));
    }
    if let Some(&c) = causes.iter().find(|&&c| c as usize > n_causes) {
        return Err(CoreError::Data(format!("cause label {c} exceeds the {n_causes} declared causes")));
    }
    let order = sorted_order(times);
    let full = AalenJohansen::fit_sorted(times, causes, n_causes, &order, None).on_grid(grid);
    let kk = grid.len();
    let mut values = vec![0.0; n * kk * n_causes];
    let nf = n as f64;
    for i in 0..n {
        let loo = AalenJohansen::fit_sorted(times, causes, n_causes, &order, Some(i)).on_grid(grid);
        for k in 0..kk {
            for c in 0..n_causes {
                values[(i * kk + k) * n_causes + c] = nf * full[c][k] - (nf - 1.0) * loo[c][k];
            }
        }
    }
    Ok(PseudoValueMatrix { n, n_causes, grid: grid.clone(), values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn km_without_censoring_is_empirical_survivor() {
        let s = kaplan_meier(&[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(s.times, vec![1.0, 2.0, 3.0]);
        assert!(close(s.values[0], 2.0 / 3.0) && close(s.values[1], 1.0 / 3.0) && close(s.values[2], 0.0));
    }

    #[test]
    fn km_all_censored_is_one() {
        let s = kaplan_meier(&[1.0, 2.0], &[false, false]).unwrap();
        assert!(s.times.is_empty());
        assert_eq!(s.eval(10.0), 1.0);
    }

    #[test]
    fn km_hand_example() {
        let s = kaplan_meier(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]).unwrap();
        assert!(close(s.eval(1.0), 0.75));
        assert!(close(s.eval(3.0), 0.375));
        assert!(close(s.eval(4.0), 0.0));
        assert!(close(s.eval_left(3.0), 0.75));
    }

    #[test]
    fn km_rejects_empty() {
        assert!(kaplan_meier(&[], &[]).is_err());
    }

    #[test]
    fn censoring_survival_hand_example() {
        let g = censoring_survival(&[1.0, 2.0, 3.0, 4.0], &[1, 0, 2, 1]).unwrap();
        assert!(close(g.eval(2.0), 2.0 / 3.0));
        let none = censoring_survival(&[1.0, 2.0], &[1, 2]).unwrap();
        assert_eq!(none.eval(5.0), 1.0);
    }

    #[test]
    fn censoring_ties_put_events_first() {
        // event and censoring at t=2: only the censored subject and later ones are at risk of censoring
        let g = censoring_survival(&[1.0, 2.0, 2.0, 3.0], &[1, 1, 0, 1]).unwrap();
        assert!(close(g.eval(2.0), 0.5));
    }

    #[test]
    fn aalen_johansen_hand_example() {
        let aj = AalenJohansen::fit(&[1.0, 2.0, 3.0, 4.0], &[1, 0, 2, 1], 2).unwrap();
        assert!(close(aj.cif_at(1, 1.0), 0.25));
        assert!(close(aj.cif_at(2, 3.0), 0.375));
        assert!(close(aj.cif_at(1, 4.0), 0.625));
        assert!(close(aj.cif_at(1, 4.0) + aj.cif_at(2, 4.0), 1.0));
    }

    #[test]
    fn pseudo_values_uncensored_are_indicators() {
        let times = [1.0, 2.5, 2.5, 4.0, 5.0];
        let causes = [1, 2, 1, 1, 2];
        let grid = TimeGrid::new(vec![2.0, 3.0, 6.0]).unwrap();
        let pv = jackknife_pseudo(&times, &causes, 2, &grid).unwrap();
        for i in 0..5 {
            for (k, &t) in grid.points().iter().enumerate() {
                for c in 1..=2 {
                    let want = (times[i] <= t && causes[i] as usize == c) as u8 as f64;
                    assert!((pv.get(i, k, c) - want).abs() < 1e-12);
                }
            }
        }
    }
}
