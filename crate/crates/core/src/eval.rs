//! Time-dependent discrimination metrics, the cross-validation harness and
//! the paired signed-rank test.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::{apply_inclusion, to_transition_records, Cohort, Preprocessor, RiskMode};
use crate::design::{ModelData, N_CAUSES};
use crate::error::{CoreError, Result};
use crate::estimators::{censoring_survival, StepFunction};
use crate::grid::{CifCurve, TimeGrid};
use crate::models::ModelSpec;

/// Pair weighting of the concordance index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Concordance {
    /// Pairs weighted by `1/Ĝ(t_i−)²`.
    #[default]
    Ipcw,
    /// Unweighted counting.
    Harrell,
}

/// Fenwick tree of weights over score ranks.
struct Fenwick(Vec<f64>);

impl Fenwick {
    fn add(&mut self, mut i: usize, w: f64) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += w;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum over ranks `< i`.
    fn prefix(&self, mut i: usize) -> f64 {
        let mut s = 0.0;
        while i > 0 {
            s += self.0[i];
            i &= i - 1;
        }
        s
    }
}

fn check_outcomes(n: usize, time: &[f64], cause: &[u8]) -> Result<()> {
    if time.len() != n || cause.len() != n {
        return Err(CoreError::Data(format!("{n} scores for {} times and {} causes", time.len(), cause.len())));
    }
    if time.iter().any(|t| !t.is_finite()) {
        return Err(CoreError::Data("non-finite event time".into()));
    }
    Ok(())
}

/// Cause-specific concordance of `risk` with the observed order of events.
///
/// Subject `i` with an event of `target` at `t_i ≤ tau` is compared with every
/// `j` still event-free after `t_i` (or censored at `t_i`). Score ties count
/// one half. `censoring` is required for [`Concordance::Ipcw`].
pub fn concordance_index(
    risk: &[f64],
    time: &[f64],
    cause: &[u8],
    target: u8,
    tau: f64,
    weighting: Concordance,
    censoring: Option<&StepFunction>,
) -> Result<f64> {
    let n = risk.len();
    check_outcomes(n, time, cause)?;
    if risk.iter().any(|r| r.is_nan()) {
        return Err(CoreError::Numeric("NaN risk score".into()));
    }
    let weight = |t: f64| -> Result<f64> {
        match weighting {
            Concordance::Harrell => Ok(1.0),
            Concordance::Ipcw => {
                let g = censoring
                    .ok_or_else(|| CoreError::Config("IPCW concordance needs a censoring survival curve".into()))?
                    .eval_left(t);
                if g <= 0.0 {
                    return Err(CoreError::Numeric(format!("censoring survival is zero before t = {t}")));
                }
                Ok(1.0 / (g * g))
            }
        }
    };
    let mut sorted: Vec<f64> = risk.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&v| v < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let mut tree = Fenwick(vec![0.0; sorted.len() + 1]);
    let mut in_tree = 0.0;
    let (mut num, mut den) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let t = time[order[start]];
        let end = start + order[start..].iter().take_while(|&&i| time[i] == t).count();
        let group = &order[start..end];
        for &j in group.iter().filter(|&&j| cause[j] == 0) {
            tree.add(rank(risk[j]), 1.0);
            in_tree += 1.0;
        }
        if t <= tau {
            for &i in group.iter().filter(|&&i| cause[i] == target) {
                if in_tree == 0.0 {
                    continue;
                }
                let w = weight(t)?;
                let r = rank(risk[i]);
                let below = tree.prefix(r);
                let tied = tree.prefix(r + 1) - below;
                num += w * (below + 0.5 * tied);
                den += w * in_tree;
            }
        }
        for &j in group.iter().filter(|&&j| cause[j] != 0) {
            tree.add(rank(risk[j]), 1.0);
            in_tree += 1.0;
        }
        start = end;
    }
    if den == 0.0 {
        return Err(CoreError::Data(format!("no comparable pairs for cause {target}")));
    }
    Ok(num / den)
}

/// Cumulative/dynamic AUC per grid point with its case-weighted summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicAuc {
    /// `None` where a grid point has no cases or no controls.
    pub per_time: Vec<Option<f64>>,
    /// Summed case weight newly entering at each grid point.
    pub increments: Vec<f64>,
    pub mean: f64,
    /// Grid indices that were skipped.
    pub skipped: Vec<usize>,
}

/// IPCW cumulative/dynamic AUC of the incidence scores `scores[i][k]` (cause
/// `target` at grid point `k`).
///
/// At `t_k` cases had the cause by `t_k` (weight `1/Ĝ(T_i−)`) and controls
/// are still event-free after `t_k`. The summary averages `AUC(t_k)` with
/// weights equal to the case weight first entering at `t_k`.
pub fn cumulative_dynamic_auc(
    scores: &[Vec<f64>],
    time: &[f64],
    cause: &[u8],
    target: u8,
    grid: &TimeGrid,
    censoring: &StepFunction,
) -> Result<DynamicAuc> {
    let n = scores.len();
    check_outcomes(n, time, cause)?;
    let k_len = grid.len();
    if scores.iter().any(|s| s.len() != k_len) {
        return Err(CoreError::Data(format!("score rows must have {k_len} grid values")));
    }
    let mut case_w = vec![0.0; n];
    for i in 0..n {
        if cause[i] == target {
            let g = censoring.eval_left(time[i]);
            if g <= 0.0 {
                return Err(CoreError::Numeric(format!("censoring survival is zero before t = {}", time[i])));
            }
            case_w[i] = 1.0 / g;
        }
    }
    let mut per_time = Vec::with_capacity(k_len);
    let mut increments = Vec::with_capacity(k_len);
    let mut skipped = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (k, &t) in grid.points().iter().enumerate() {
        let inc: f64 = (0..n).filter(|&i| cause[i] == target && time[i] > prev && time[i] <= t).map(|i| case_w[i]).sum();
        increments.push(inc);
        prev = t;
        let mut controls: Vec<f64> = (0..n).filter(|&j| time[j] > t).map(|j| scores[j][k]).collect();
        let cases: Vec<usize> = (0..n).filter(|&i| cause[i] == target && time[i] <= t).collect();
        if cases.is_empty() || controls.is_empty() {
            per_time.push(None);
            skipped.push(k);
            continue;
        }
        controls.sort_by(f64::total_cmp);
        let (mut num, mut den) = (0.0, 0.0);
        for &i in &cases {
            let s = scores[i][k];
            let below = controls.partition_point(|&c| c < s);
            let upto = controls.partition_point(|&c| c <= s);
            num += case_w[i] * (below as f64 + 0.5 * (upto - below) as f64);
            den += case_w[i];
        }
        per_time.push(Some(num / (den * controls.len() as f64)));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, w) in per_time.iter().zip(&increments) {
        if let Some(a) = a {
            num += a * w;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(CoreError::Data(format!("no grid point has both cases and controls for cause {target}")));
    }
    Ok(DynamicAuc { per_time, increments, mean: num / den, skipped })
}

/// Signed-rank test result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of nonzero differences.
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size tested by full enumeration of sign assignments.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Two-sided Wilcoxon signed-rank test of `a − b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(CoreError::Data(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Data("non-finite paired difference".into()));
    }
    let n = d.len();
    if n == 0 {
        return Ok(Wilcoxon { statistic: 0.0, p_value: 1.0, n: 0, exact: true });
    }
    // average ranks of |d|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut s = 0;
    while s < n {
        let e = s + order[s..].iter().take_while(|&&i| d[i].abs() == d[order[s]].abs()).count();
        let r = (s + 1 + e) as f64 / 2.0;
        for &i in &order[s..e] {
            ranks[i] = r;
        }
        let t = (e - s) as f64;
        tie_term += t * t * t - t;
        s = e;
    }
    let w: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    if n <= WILCOXON_EXACT_MAX {
        let total = 1u32 << n;
        let (mut ge, mut le) = (0u32, 0u32);
        for mask in 0..total {
            let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s >= w - 1e-9 {
                ge += 1;
            }
            if s <= w + 1e-9 {
                le += 1;
            }
        }
        let p = (2.0 * f64::from(ge.min(le)) / f64::from(total)).min(1.0);
        return Ok(Wilcoxon { statistic: w, p_value: p, n, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (w - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z.abs())).min(1.0)
    };
    Ok(Wilcoxon { statistic: w, p_value: p, n, exact: false })
}

/// Significance code of a p-value: `***` < 0.001, `**` < 0.01, `*` < 0.05, `·` < 0.1.
pub fn significance_code(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "·"
    } else {
        ""
    }
}

/// Metrics of one held-out fold; index `c − 1` holds cause `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// `None` when there were no comparable pairs.
    pub concordance: Vec<Option<f64>>,
    pub auc: Vec<Option<f64>>,
    /// Per-grid-point AUC curves behind the summaries.
    pub auc_curves: Vec<Option<Vec<Option<f64>>>>,
}

/// Cross-validated discrimination of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub risk_mode: RiskMode,
    pub folds: Vec<FoldMetrics>,
}

/// Mean and population standard deviation of the available values.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

impl MetricReport {
    /// Per-fold concordance of a 1-based cause, skipping NA folds.
    pub fn concordance_values(&self, cause: usize) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.concordance[cause - 1]).collect()
    }

    pub fn auc_values(&self, cause: usize) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.auc[cause - 1]).collect()
    }

    pub fn concordance_summary(&self, cause: usize) -> Option<(f64, f64)> {
        mean_std(&self.concordance_values(cause))
    }

    pub fn auc_summary(&self, cause: usize) -> Option<(f64, f64)> {
        mean_std(&self.auc_values(cause))
    }
}

/// Settings of the cross-validation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub concordance: Concordance,
    /// Inclusion rule applied before splitting: minimum observed months.
    pub min_records: usize,
    /// Inclusion rule applied before splitting: months kept per sequence.
    pub max_len: usize,
    /// Evaluate folds on the rayon pool.
    pub parallel: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 10, seed: 0, concordance: Concordance::Ipcw, min_records: 4, max_len: 24, parallel: true }
    }
}

/// Patient-level fold of each of `n` patients; sizes differ by at most one.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(CoreError::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(CoreError::Data(format!("{n} patients cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

/// Preprocessed model inputs of one fold: statistics fitted on the training patients only.
pub struct FoldData {
    pub data: ModelData,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Builds the inputs of fold `f`.
pub fn fold_data(cohort: &Cohort, folds: &[usize], f: usize) -> Result<FoldData> {
    let fit_ids: HashSet<String> =
        cohort.sequences.iter().zip(folds).filter(|(_, &g)| g != f).map(|(s, _)| s.id.clone()).collect();
    let prepared = Preprocessor::fit(cohort, &fit_ids)?.apply(cohort);
    let records = to_transition_records(&prepared);
    let data = ModelData::new(&prepared, &records);
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| folds[data.patient[i]] == f);
    Ok(FoldData { data, train, test })
}

/// Discrimination of `pred` on records `test`, with censoring weights from `train`.
pub fn score_predictions(
    data: &ModelData,
    train: &[usize],
    test: &[usize],
    pred: &[CifCurve],
    weighting: Concordance,
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>, Vec<Option<Vec<Option<f64>>>>)> {
    let pos: std::collections::HashMap<usize, usize> = test.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let k_last = data.grid.len() - 1;
    let mut cidx = Vec::with_capacity(N_CAUSES);
    let mut auc = Vec::with_capacity(N_CAUSES);
    let mut curves = Vec::with_capacity(N_CAUSES);
    for c in 1..=N_CAUSES {
        let tr = data.eligible(c, train);
        let te = data.eligible(c, test);
        let g = censoring_survival(&data.times_of(&tr), &data.causes_of(&tr))?;
        let time = data.times_of(&te);
        let cause = data.causes_of(&te);
        let risk: Vec<f64> = te.iter().map(|i| pred[pos[i]].at(c, k_last)).collect();
        cidx.push(
            concordance_index(&risk, &time, &cause, c as u8, data.grid.last(), weighting, Some(&g)).ok(),
        );
        let scores: Vec<Vec<f64>> = te.iter().map(|i| pred[pos[i]].values[c - 1].clone()).collect();
        match cumulative_dynamic_auc(&scores, &time, &cause, c as u8, &data.grid, &g) {
            Ok(a) => {
                auc.push(Some(a.mean));
                curves.push(Some(a.per_time));
            }
            Err(CoreError::Data(_)) => {
                auc.push(None);
                curves.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((cidx, auc, curves))
}

fn run_fold(cohort: &Cohort, folds: &[usize], f: usize, spec: &ModelSpec, cfg: &CvConfig) -> Result<FoldMetrics> {
    let fd = fold_data(cohort, folds, f)?;
    for c in 1..=N_CAUSES {
        let tr = fd.data.eligible(c, &fd.train);
        if !tr.iter().any(|&i| fd.data.cause[i] == c as u8) {
            return Err(CoreError::Data(format!("fold {} has no training events of cause {c}", f + 1)));
        }
    }
    let spec = spec.with_seed(cfg.seed.wrapping_add(f as u64));
    let model = spec.fit(&fd.data, &fd.train).map_err(|e| match e {
        CoreError::Data(m) => CoreError::Data(format!("fold {}: {m}", f + 1)),
        other => other,
    })?;
    let pred = model.predict(&fd.data, &fd.test)?;
    let (concordance, auc, auc_curves) = score_predictions(&fd.data, &fd.train, &fd.test, &pred, cfg.concordance)?;
    log::info!("{} fold {}: C-index {:?}, AUC {:?}", spec.name(), f + 1, concordance, auc);
    Ok(FoldMetrics { fold: f + 1, n_train: fd.train.len(), n_test: fd.test.len(), concordance, auc, auc_curves })
}

/// Patient-level `k`-fold cross-validation of one model on a raw cohort.
///
/// Inclusion rules, then per fold: preprocessing fitted on the training
/// patients, model fit on their transition records, and metrics on the
/// held-out records (cause 1 on initial-state records only).
pub fn kfold_cv(cohort: &Cohort, spec: &ModelSpec, cfg: &CvConfig) -> Result<MetricReport> {
    spec.validate()?;
    let cohort = apply_inclusion(cohort, cfg.min_records, cfg.max_len);
    let folds = assign_folds(cohort.len(), cfg.k, cfg.seed)?;
    let run = |f: usize| run_fold(&cohort, &folds, f, spec, cfg);
    let results: Vec<Result<FoldMetrics>> =
        if cfg.parallel { (0..cfg.k).into_par_iter().map(run).collect() } else { (0..cfg.k).map(run).collect() };
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { model: spec.name().to_string(), risk_mode: cohort.risk_mode, folds })
}
