//! Cause-specific Cox and Fine–Gray subdistribution hazards models.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::estimators::{censoring_survival, StepFunction};
use crate::grid::{project_cif, CifCurve, TimeGrid};

/// Log partial likelihood with its gradient and Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLik {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Coefficients beyond this magnitude signal a monotone likelihood.
    pub max_abs_beta: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, max_abs_beta: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub ridge_used: bool,
    /// Log-likelihood after each accepted step, starting at β = 0.
    pub loglik_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub cause: u8,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// Standard errors from the inverse observed information (0 for dropped columns).
    pub std_err: Vec<f64>,
    /// Breslow cumulative baseline hazard.
    pub baseline: StepFunction,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrayModel {
    pub cause: u8,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Cumulative subdistribution baseline hazard.
    pub baseline: StepFunction,
    /// Censoring survival used for the competing-event weights.
    pub censoring: StepFunction,
    pub diagnostics: FitDiagnostics,
}

/// Competing-event subjects kept in the risk set with weight `Ĝ(t−)/Ĝ(T_j−)`.
struct Subdistribution<'a> {
    competing: Vec<bool>,
    g: &'a StepFunction,
}

fn check_design(x: &[Vec<f64>], time: &[f64], cause: &[u8]) -> Result<usize> {
    let n = x.len();
    if n == 0 || time.len() != n || cause.len() != n {
        return Err(CoreError::Data("design, times and causes must be nonempty and aligned".into()));
    }
    let p = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(CoreError::Data(format!("row {i} has {} covariates, expected {p}", row.len())));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Data(format!("non-finite covariate {j} in row {i}")));
        }
        if !(time[i] > 0.0 && time[i].is_finite()) {
            return Err(CoreError::Data(format!("non-positive time in row {i}")));
        }
    }
    Ok(p)
}

/// Tie groups `[a, b)` of the time-sorted order.
fn tie_groups(order: &[usize], time: &[f64]) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut a = 0;
    while a < order.len() {
        let t = time[order[a]];
        let mut b = a;
        while b < order.len() && time[order[b]] == t {
            b += 1;
        }
        groups.push((a, b));
        a = b;
    }
    groups
}

/// Running `Σw, Σw·x, Σw·xxᵀ`.
#[derive(Clone)]
struct Moments {
    s0: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Moments {
    fn new(p: usize) -> Self {
        Self { s0: 0.0, s1: vec![0.0; p], s2: vec![0.0; p * p] }
    }

    fn add(&mut self, w: f64, xi: &[f64]) {
        let p = xi.len();
        self.s0 += w;
        for j in 0..p {
            self.s1[j] += w * xi[j];
            for k in 0..p {
                self.s2[j * p + k] += w * xi[j] * xi[k];
            }
        }
    }

    fn add_scaled(&mut self, s: f64, other: &Moments) {
        self.s0 += s * other.s0;
        self.s1.iter_mut().zip(&other.s1).for_each(|(a, b)| *a += s * b);
        self.s2.iter_mut().zip(&other.s2).for_each(|(a, b)| *a += s * b);
    }
}

/// Weighted risk-set moments at each tie group with a target event.
///
/// Ordinary members (`T_j >= t`) are accumulated in a descending sweep;
/// competing events with `T_j < t` enter with weight `Ĝ(t−)/Ĝ(T_j−)` through an
/// ascending prefix sum.
fn risk_moments(
    risk: &[f64],
    x: &[Vec<f64>],
    time: &[f64],
    status: &[bool],
    sub: Option<&Subdistribution>,
    with_second: bool,
) -> (Vec<usize>, Vec<(usize, usize)>, Vec<Option<Moments>>) {
    let n = x.len();
    let p = if with_second { x[0].len() } else { 0 };
    let project = |xi: &[f64]| -> Vec<f64> { if with_second { xi.to_vec() } else { Vec::new() } };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let groups = tie_groups(&order, time);
    let has_event: Vec<bool> = groups.iter().map(|&(a, b)| order[a..b].iter().any(|&i| status[i])).collect();
    let mut out: Vec<Option<Moments>> = vec![None; groups.len()];
    if let Some(sub) = sub {
        let mut comp = Moments::new(p);
        for (g, &(a, b)) in groups.iter().enumerate() {
            if has_event[g] {
                let mut m = Moments::new(p);
                m.add_scaled(sub.g.eval_left(time[order[a]]), &comp);
                out[g] = Some(m);
            }
            for &i in &order[a..b] {
                if sub.competing[i] {
                    comp.add(risk[i] / sub.g.eval_left(time[i]).max(1e-300), &project(&x[i]));
                }
            }
        }
    }
    let mut ord = Moments::new(p);
    for (g, &(a, b)) in groups.iter().enumerate().rev() {
        for &i in &order[a..b] {
            ord.add(risk[i], &project(&x[i]));
        }
        if has_event[g] {
            let slot = out[g].get_or_insert_with(|| Moments::new(p));
            slot.add_scaled(1.0, &ord);
        }
    }
    (order, groups, out)
}

fn risk_scores(beta: &[f64], x: &[Vec<f64>]) -> Vec<f64> {
    x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp()).collect()
}

/// Breslow log partial likelihood, gradient and Hessian, optionally with
/// subdistribution weights for competing events.
fn loglik_impl(beta: &[f64], x: &[Vec<f64>], time: &[f64], status: &[bool], sub: Option<&Subdistribution>) -> LogLik {
    let p = beta.len();
    let risk = risk_scores(beta, x);
    let (order, groups, moments) = risk_moments(&risk, x, time, status, sub, true);
    let mut value = 0.0;
    let mut grad = vec![0.0; p];
    let mut hess = vec![vec![0.0; p]; p];
    for (g, &(a, b)) in groups.iter().enumerate() {
        let Some(m) = &moments[g] else { continue };
        let events: Vec<usize> = order[a..b].iter().copied().filter(|&i| status[i]).collect();
        let df = events.len() as f64;
        value -= df * m.s0.ln();
        for &i in &events {
            value += x[i].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            for j in 0..p {
                grad[j] += x[i][j];
            }
        }
        for j in 0..p {
            grad[j] -= df * m.s1[j] / m.s0;
            for k in 0..p {
                hess[j][k] -= df * (m.s2[j * p + k] / m.s0 - m.s1[j] * m.s1[k] / (m.s0 * m.s0));
            }
        }
    }
    LogLik { value, grad, hess }
}

/// Cause-specific log partial likelihood; other causes count as censored.
pub fn cox_partial_loglik(beta: &[f64], x: &[Vec<f64>], time: &[f64], cause: &[u8], target: u8) -> Result<LogLik> {
    let p = check_design(x, time, cause)?;
    if beta.len() != p {
        return Err(CoreError::Data(format!("beta has {} entries, design has {p} columns", beta.len())));
    }
    let status: Vec<bool> = cause.iter().map(|&c| c == target).collect();
    Ok(loglik_impl(beta, x, time, &status, None))
}

/// Fine–Gray weighted log partial likelihood with weights from `censoring`.
pub fn fine_gray_loglik(
    beta: &[f64],
    x: &[Vec<f64>],
    time: &[f64],
    cause: &[u8],
    target: u8,
    censoring: &StepFunction,
) -> Result<LogLik> {
    let p = check_design(x, time, cause)?;
    if beta.len() != p {
        return Err(CoreError::Data(format!("beta has {} entries, design has {p} columns", beta.len())));
    }
    let status: Vec<bool> = cause.iter().map(|&c| c == target).collect();
    let sub = Subdistribution { competing: cause.iter().map(|&c| c != 0 && c != target).collect(), g: censoring };
    Ok(loglik_impl(beta, x, time, &status, Some(&sub)))
}

struct NewtonResult {
    beta: Vec<f64>,
    std_err: Vec<f64>,
    diagnostics: FitDiagnostics,
}

fn is_constant(x: &[Vec<f64>], j: usize) -> bool {
    x.iter().all(|r| r[j] == x[0][j])
}

/// Newton–Raphson with step-halving on the non-constant columns.
fn newton(
    x: &[Vec<f64>],
    names: &[String],
    cfg: &FitConfig,
    eval: impl Fn(&[f64], &[Vec<f64>]) -> LogLik,
) -> Result<NewtonResult> {
    let p = x[0].len();
    let active: Vec<usize> = (0..p).filter(|&j| !is_constant(x, j)).collect();
    let xa: Vec<Vec<f64>> = x.iter().map(|r| active.iter().map(|&j| r[j]).collect()).collect();
    let q = active.len();
    let mut beta = vec![0.0; q];
    let mut cur = eval(&beta, &xa);
    let mut diag =
        FitDiagnostics { iterations: 0, grad_norm: 0.0, converged: false, ridge_used: false, loglik_trace: vec![cur.value] };
    let mut info;
    loop {
        let gnorm = cur.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        diag.grad_norm = gnorm;
        info = DMatrix::from_fn(q, q, |i, j| -cur.hess[i][j]);
        if gnorm < cfg.tol {
            diag.converged = true;
            break;
        }
        if diag.iterations >= cfg.max_iter {
            warn!("Newton-Raphson stopped after {} iterations with gradient norm {gnorm:e}", cfg.max_iter);
            break;
        }
        diag.iterations += 1;
        let g = DVector::from_vec(cur.grad.clone());
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                let ridge = 1e-8;
                diag.ridge_used = true;
                debug!("Hessian not positive definite; adding ridge {ridge:e}");
                let mut m = info.clone();
                for i in 0..q {
                    m[(i, i)] += ridge;
                }
                m.cholesky().ok_or(CoreError::Singular { ridge })?.solve(&g)
            }
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let next = eval(&cand, &xa);
            if next.value.is_finite() && next.value >= cur.value - 1e-12 * cur.value.abs().max(1.0) {
                accepted = Some((cand, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, next)) = accepted else {
            warn!("step-halving failed to improve the likelihood; stopping");
            break;
        };
        if let Some((k, _)) = cand.iter().enumerate().find(|(_, b)| b.abs() > cfg.max_abs_beta) {
            return Err(CoreError::Divergence { covariate: names[active[k]].clone(), bound: cfg.max_abs_beta });
        }
        let stalled = next.value - cur.value <= 1e-15 * cur.value.abs().max(1.0)
            && step.iter().fold(0.0f64, |m, s| m.max((scale * s).abs())) < 1e-12;
        beta = cand;
        cur = next;
        diag.loglik_trace.push(cur.value);
        if stalled {
            diag.grad_norm = cur.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            diag.converged = true;
            info = DMatrix::from_fn(q, q, |i, j| -cur.hess[i][j]);
            break;
        }
    }
    let se_active: Vec<f64> = match info.clone().try_inverse() {
        Some(inv) => (0..q).map(|i| inv[(i, i)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; q],
    };
    // an infinite maximizer shows up as a large coefficient with vanishing information
    if let Some(k) = (0..q).find(|&k| beta[k].abs() > 10.0 && !(se_active[k] < 1e3)) {
        return Err(CoreError::Divergence { covariate: names[active[k]].clone(), bound: cfg.max_abs_beta });
    }
    let mut full = vec![0.0; p];
    let mut se = vec![0.0; p];
    for (k, &j) in active.iter().enumerate() {
        full[j] = beta[k];
        se[j] = se_active[k];
    }
    Ok(NewtonResult { beta: full, std_err: se, diagnostics: diag })
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

/// Breslow increments `d(t) / Σ_risk w e^{βx}` at distinct target-cause event times.
fn breslow(beta: &[f64], x: &[Vec<f64>], time: &[f64], status: &[bool], sub: Option<&Subdistribution>) -> StepFunction {
    let risk = risk_scores(beta, x);
    let (order, groups, moments) = risk_moments(&risk, x, time, status, sub, false);
    let mut out = StepFunction::constant(0.0);
    let mut cum = 0.0;
    for (g, &(a, b)) in groups.iter().enumerate() {
        let Some(m) = &moments[g] else { continue };
        let d = order[a..b].iter().filter(|&&i| status[i]).count();
        cum += d as f64 / m.s0;
        out.times.push(time[order[a]]);
        out.values.push(cum);
    }
    out
}

/// Fits a cause-specific Cox model (Breslow ties) by Newton–Raphson from β = 0.
pub fn fit_cs_cox(
    x: &[Vec<f64>],
    time: &[f64],
    cause: &[u8],
    target: u8,
    names: Option<&[String]>,
    cfg: &FitConfig,
) -> Result<CoxModel> {
    let p = check_design(x, time, cause)?;
    if !cause.contains(&target) {
        return Err(CoreError::Data(format!("no events of cause {target} in the fit data")));
    }
    let names = names.map_or_else(|| default_names(p), <[String]>::to_vec);
    let status: Vec<bool> = cause.iter().map(|&c| c == target).collect();
    let fit = newton(x, &names, cfg, |b, xa| loglik_impl(b, xa, time, &status, None))?;
    let baseline = breslow(&fit.beta, x, time, &status, None);
    Ok(CoxModel { cause: target, names, beta: fit.beta, std_err: fit.std_err, baseline, diagnostics: fit.diagnostics })
}

/// Fits a Fine–Gray model with Kaplan–Meier censoring weights.
pub fn fit_fine_gray(
    x: &[Vec<f64>],
    time: &[f64],
    cause: &[u8],
    target: u8,
    names: Option<&[String]>,
    cfg: &FitConfig,
) -> Result<FineGrayModel> {
    let p = check_design(x, time, cause)?;
    if !cause.contains(&target) {
        return Err(CoreError::Data(format!("no events of cause {target} in the fit data")));
    }
    let names = names.map_or_else(|| default_names(p), <[String]>::to_vec);
    let g = censoring_survival(time, cause)?;
    let status: Vec<bool> = cause.iter().map(|&c| c == target).collect();
    let sub = Subdistribution { competing: cause.iter().map(|&c| c != 0 && c != target).collect(), g: &g };
    let fit = newton(x, &names, cfg, |b, xa| loglik_impl(b, xa, time, &status, Some(&sub)))?;
    let baseline = breslow(&fit.beta, x, time, &status, Some(&sub));
    Ok(FineGrayModel {
        cause: target,
        names,
        beta: fit.beta,
        std_err: fit.std_err,
        baseline,
        censoring: g,
        diagnostics: fit.diagnostics,
    })
}

fn linpred(beta: &[f64], x: &[f64]) -> f64 {
    beta.iter().zip(x).map(|(b, v)| b * v).sum()
}

/// CIF from cause-specific hazards: product-limit overall survival with
/// Breslow increments scaled by `exp(β_c·x)`; flat beyond the last event.
pub fn predict_cif_cox(models: &[CoxModel], x: &[f64], grid: &TimeGrid) -> CifCurve {
    let mut times: Vec<f64> = models.iter().flat_map(|m| m.baseline.times.iter().copied()).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let scale: Vec<f64> = models.iter().map(|m| linpred(&m.beta, x).exp()).collect();
    let mut f = vec![0.0; models.len()];
    let mut s = 1.0;
    let mut path: Vec<(f64, Vec<f64>)> = Vec::with_capacity(times.len());
    for &t in &times {
        let mut dh: Vec<f64> =
            models.iter().zip(&scale).map(|(m, e)| (m.baseline.eval(t) - m.baseline.eval_left(t)) * e).collect();
        let total: f64 = dh.iter().sum();
        if total > 1.0 {
            dh.iter_mut().for_each(|h| *h /= total);
        }
        for (fc, h) in f.iter_mut().zip(&dh) {
            *fc += s * h;
        }
        s *= (1.0 - dh.iter().sum::<f64>()).max(0.0);
        path.push((t, f.clone()));
    }
    let values = (0..models.len())
        .map(|c| {
            grid.points()
                .iter()
                .map(|&t| match path.partition_point(|(pt, _)| *pt <= t) {
                    0 => 0.0,
                    k => path[k - 1].1[c],
                })
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();
    project_cif(&values)
}

/// Subdistribution CIFs `1 − exp(−Λ_sub(t) e^{βx})`, jointly projected so the total stays ≤ 1.
pub fn predict_cif_fine_gray(models: &[FineGrayModel], x: &[f64], grid: &TimeGrid) -> CifCurve {
    let raw: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            let e = linpred(&m.beta, x).exp();
            grid.points().iter().map(|&t| 1.0 - (-m.baseline.eval(t) * e).exp()).collect()
        })
        .collect();
    project_cif(&raw)
}

/// Hazard ratio with a Wald 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRatio {
    pub name: String,
    pub beta: f64,
    pub hr: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn hazard_ratios(names: &[String], beta: &[f64], std_err: &[f64]) -> Vec<HazardRatio> {
    let z = 1.959_963_984_540_054;
    names
        .iter()
        .zip(beta.iter().zip(std_err))
        .map(|(n, (&b, &se))| HazardRatio {
            name: n.clone(),
            beta: b,
            hr: b.exp(),
            lower: (b - z * se).exp(),
            upper: (b + z * se).exp(),
        })
        .collect()
}
