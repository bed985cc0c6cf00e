//! Brute-force reference implementations and random instances.
//!
//! Each `check_*` function returns the largest absolute deviation between
//! the library and the reference on one instance.

#![allow(dead_code)]

use rand::Rng;
use survbench_autodiff::{Graph, Tensor};
use survbench_core::deep::losses::ranking_loss;
use survbench_core::estimators::{censoring_survival, jackknife_pseudo, AalenJohansen};
use survbench_core::eval::{concordance_index, cumulative_dynamic_auc, Concordance};
use survbench_core::gbm::ipcw_log_loss;
use survbench_core::{CifCurve, TimeGrid};

pub const N_CAUSES: usize = 2;

/// Right-censored competing-risks sample with frequent tied times.
#[derive(Debug, Clone)]
pub struct Instance {
    pub time: Vec<f64>,
    pub cause: Vec<u8>,
    pub grid: TimeGrid,
}

pub fn instance<R: Rng>(rng: &mut R, n_max: usize) -> Instance {
    let n = rng.random_range(8..=n_max);
    let levels = rng.random_range(5..=40);
    let time: Vec<f64> = (0..n).map(|_| 0.5 * rng.random_range(1..=levels) as f64).collect();
    let cause: Vec<u8> = (0..n).map(|_| rng.random_range(0..=2)).collect();
    let horizon = 0.5 * levels as f64;
    let k = rng.random_range(3..=12);
    let grid = TimeGrid::new((1..=k).map(|j| horizon * j as f64 / k as f64).collect()).unwrap();
    Instance { time, cause, grid }
}

/// Scores with occasional ties.
pub fn scores<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| (rng.random_range(0..20) as f64) / 7.0).collect()
}

/// Kaplan–Meier of the censoring distribution just before `t`, events at a
/// tied time leaving the risk set before censorings.
pub fn censoring_left(time: &[f64], cause: &[u8], t: f64) -> f64 {
    let mut distinct: Vec<f64> = time.iter().copied().filter(|&s| s < t).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut g = 1.0;
    for s in distinct {
        let at_risk = time.iter().filter(|&&u| u >= s).count() as f64;
        let events = time.iter().zip(cause).filter(|(&u, &c)| u == s && c != 0).count() as f64;
        let cens = time.iter().zip(cause).filter(|(&u, &c)| u == s && c == 0).count() as f64;
        if cens > 0.0 {
            g *= 1.0 - cens / (at_risk - events);
        }
    }
    g
}

/// `F_c(t) = Σ_{s ≤ t} S(s−)·d_c(s)/n(s)` summed directly over distinct times.
pub fn aalen_johansen(time: &[f64], cause: &[u8], c: u8, t: f64) -> f64 {
    let mut distinct: Vec<f64> = time.iter().copied().filter(|&s| s <= t).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let (mut s_prev, mut f) = (1.0, 0.0);
    for s in distinct {
        let n = time.iter().filter(|&&u| u >= s).count() as f64;
        let d_all = time.iter().zip(cause).filter(|(&u, &k)| u == s && k != 0).count() as f64;
        let d_c = time.iter().zip(cause).filter(|(&u, &k)| u == s && k == c).count() as f64;
        f += s_prev * d_c / n;
        s_prev *= 1.0 - d_all / n;
    }
    f
}

/// Kaplan–Meier with every cause as the event, by direct product.
pub fn kaplan_meier(time: &[f64], event: &[bool], t: f64) -> f64 {
    let mut distinct: Vec<f64> = time.iter().copied().filter(|&s| s <= t).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    distinct
        .iter()
        .map(|&s| {
            let n = time.iter().filter(|&&u| u >= s).count() as f64;
            let d = time.iter().zip(event).filter(|(&u, &e)| u == s && e).count() as f64;
            1.0 - d / n
        })
        .product()
}

pub fn check_aalen_johansen(inst: &Instance) -> f64 {
    let aj = AalenJohansen::fit(&inst.time, &inst.cause, N_CAUSES).unwrap();
    let mut worst: f64 = 0.0;
    let mut points: Vec<f64> = inst.time.clone();
    points.extend_from_slice(inst.grid.points());
    for &t in &points {
        for c in 1..=N_CAUSES {
            worst = worst.max((aj.cif_at(c, t) - aalen_johansen(&inst.time, &inst.cause, c as u8, t)).abs());
        }
        // with a single cause the incidence is one minus Kaplan–Meier
        let events: Vec<bool> = inst.cause.iter().map(|&c| c != 0).collect();
        let merged: Vec<u8> = events.iter().map(|&e| e as u8).collect();
        let single = AalenJohansen::fit(&inst.time, &merged, 1).unwrap();
        worst = worst.max((single.cif_at(1, t) - (1.0 - kaplan_meier(&inst.time, &events, t))).abs());
        worst = worst.max((aj.survival_at(t) - kaplan_meier(&inst.time, &events, t)).abs());
    }
    worst
}

/// Jackknife pseudo-values against explicit leave-one-out refits.
pub fn check_jackknife(inst: &Instance) -> f64 {
    let n = inst.time.len();
    let pv = jackknife_pseudo(&inst.time, &inst.cause, N_CAUSES, &inst.grid).unwrap();
    let full = AalenJohansen::fit(&inst.time, &inst.cause, N_CAUSES).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let t: Vec<f64> = keep.iter().map(|&j| inst.time[j]).collect();
        let c: Vec<u8> = keep.iter().map(|&j| inst.cause[j]).collect();
        let loo = AalenJohansen::fit(&t, &c, N_CAUSES).unwrap();
        for (k, &tk) in inst.grid.points().iter().enumerate() {
            for cause in 1..=N_CAUSES {
                let expected = n as f64 * full.cif_at(cause, tk) - (n - 1) as f64 * loo.cif_at(cause, tk);
                worst = worst.max((pv.get(i, k, cause) - expected).abs());
            }
        }
    }
    worst
}

/// Pairwise concordance: `i` had the target by `tau`; `j` outlived `t_i` or was censored at it.
pub fn concordance(risk: &[f64], inst: &Instance, target: u8, tau: f64, ipcw: bool) -> Option<f64> {
    let (time, cause) = (&inst.time, &inst.cause);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..time.len() {
        if cause[i] != target || time[i] > tau {
            continue;
        }
        let w = if ipcw { censoring_left(time, cause, time[i]).powi(-2) } else { 1.0 };
        for j in 0..time.len() {
            if j == i || !(time[j] > time[i] || (time[j] == time[i] && cause[j] == 0)) {
                continue;
            }
            den += w;
            if risk[i] > risk[j] {
                num += w;
            } else if risk[i] == risk[j] {
                num += 0.5 * w;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn check_concordance<R: Rng>(rng: &mut R, inst: &Instance) -> f64 {
    let risk = scores(rng, inst.time.len());
    let g = censoring_survival(&inst.time, &inst.cause).unwrap();
    let tau = inst.grid.last();
    let mut worst: f64 = 0.0;
    for target in 1..=N_CAUSES as u8 {
        for (weighting, ipcw) in [(Concordance::Harrell, false), (Concordance::Ipcw, true)] {
            let got = concordance_index(&risk, &inst.time, &inst.cause, target, tau, weighting, Some(&g)).ok();
            match (got, concordance(&risk, inst, target, tau, ipcw)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
    }
    worst
}

/// Cumulative/dynamic AUC per grid point and its increment-weighted mean.
pub fn dynamic_auc(s: &[Vec<f64>], inst: &Instance, target: u8) -> (Vec<Option<f64>>, Option<f64>) {
    let (time, cause) = (&inst.time, &inst.cause);
    let w: Vec<f64> = (0..time.len()).map(|i| 1.0 / censoring_left(time, cause, time[i])).collect();
    let mut per = Vec::new();
    let (mut num, mut den) = (0.0, 0.0);
    let mut prev = f64::NEG_INFINITY;
    for (k, &t) in inst.grid.points().iter().enumerate() {
        let (mut a, mut b) = (0.0, 0.0);
        let mut inc = 0.0;
        for i in 0..time.len() {
            if cause[i] != target || time[i] > t {
                continue;
            }
            if time[i] > prev {
                inc += w[i];
            }
            for j in 0..time.len() {
                if time[j] > t {
                    b += w[i];
                    if s[i][k] > s[j][k] {
                        a += w[i];
                    } else if s[i][k] == s[j][k] {
                        a += 0.5 * w[i];
                    }
                }
            }
        }
        prev = t;
        let auc = (b > 0.0).then(|| a / b);
        if let Some(v) = auc {
            num += v * inc;
            den += inc;
        }
        per.push(auc);
    }
    (per, (den > 0.0).then(|| num / den))
}

pub fn check_auc<R: Rng>(rng: &mut R, inst: &Instance) -> f64 {
    let n = inst.time.len();
    let s: Vec<Vec<f64>> = (0..n).map(|_| scores(rng, inst.grid.len())).collect();
    let g = censoring_survival(&inst.time, &inst.cause).unwrap();
    let mut worst: f64 = 0.0;
    for target in 1..=N_CAUSES as u8 {
        let (per, mean) = dynamic_auc(&s, inst, target);
        match (cumulative_dynamic_auc(&s, &inst.time, &inst.cause, target, &inst.grid, &g), mean) {
            (Ok(a), Some(m)) => {
                worst = worst.max((a.mean - m).abs());
                for (x, y) in a.per_time.iter().zip(&per) {
                    match (x, y) {
                        (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                        (None, None) => {}
                        _ => return f64::INFINITY,
                    }
                }
            }
            (Err(_), None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}

/// Mean of `exp(−(F_i(t_{k_i}) − F_j(t_{k_i}))/σ)` over every acceptable pair.
pub fn ranking(cif: &[Vec<f64>], inst: &Instance, target: u8, sigma: f64) -> f64 {
    let (time, cause) = (&inst.time, &inst.cause);
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..time.len() {
        if cause[i] != target {
            continue;
        }
        let Some(k) = inst.grid.points().iter().position(|&p| time[i] <= p) else { continue };
        for j in 0..time.len() {
            if j != i && time[j] > time[i] {
                total += (-(cif[i][k] - cif[j][k]) / sigma).exp();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

pub fn check_ranking<R: Rng>(rng: &mut R, inst: &Instance) -> f64 {
    let n = inst.time.len();
    let k = inst.grid.len();
    let cif: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut acc = 0.0;
            (0..k).map(|_| { acc += rng.random_range(0.0..0.1); acc }).collect()
        })
        .collect();
    let sigma = [0.1, 1.0, 3.0][rng.random_range(0..3)];
    let mut worst: f64 = 0.0;
    for target in 1..=N_CAUSES as u8 {
        let mut g = Graph::eval();
        let v = g.constant(Tensor::from_rows(&cif).unwrap());
        let l = ranking_loss(&mut g, v, &inst.grid, &inst.time, &inst.cause, target, sigma).unwrap();
        worst = worst.max((g.value(l).item() - ranking(&cif, inst, target, sigma)).abs());
    }
    worst
}

/// IPCW multinomial log loss summed term by term.
pub fn ipcw_loss(pred: &[CifCurve], inst: &Instance, cap: f64) -> f64 {
    let (time, cause) = (&inst.time, &inst.cause);
    let mut total = 0.0;
    for (i, curve) in pred.iter().enumerate() {
        for (k, &t) in inst.grid.points().iter().enumerate() {
            let (label, w) = if time[i] <= t {
                if cause[i] == 0 {
                    continue;
                }
                (cause[i] as usize, (1.0 / censoring_left(time, cause, time[i])).min(cap))
            } else {
                (0, (1.0 / censoring_left(time, cause, t)).min(cap))
            };
            let p = if label == 0 { 1.0 - curve.values[0][k] - curve.values[1][k] } else { curve.values[label - 1][k] };
            total -= w * p.ln();
        }
    }
    total / (pred.len() * inst.grid.len()) as f64
}

pub fn check_ipcw_loss<R: Rng>(rng: &mut R, inst: &Instance) -> f64 {
    let k = inst.grid.len();
    let pred: Vec<CifCurve> = (0..inst.time.len())
        .map(|_| {
            let (mut a, mut b) = (0.0, 0.0);
            let (va, vb): (Vec<f64>, Vec<f64>) = (0..k)
                .map(|_| {
                    a += rng.random_range(0.001..0.04);
                    b += rng.random_range(0.001..0.04);
                    (a, b)
                })
                .unzip();
            CifCurve { values: vec![va, vb] }
        })
        .collect();
    let g = censoring_survival(&inst.time, &inst.cause).unwrap();
    let got = ipcw_log_loss(&pred, &inst.time, &inst.cause, &inst.grid, &g, 20.0).unwrap();
    (got - ipcw_loss(&pred, inst, 20.0)).abs()
}
