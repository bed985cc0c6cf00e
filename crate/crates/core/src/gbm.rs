//! Gradient-boosted trees estimating per-cause incidence on a time grid.
//!
//! Each boosting round fits one regression tree per cause on the inputs
//! augmented with a grid time. The per-time scores `[0, f_1, f_2]` go through
//! a softmax giving P(no event by t), P(cause 1 by t), P(cause 2 by t).

use std::cmp::Ordering;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::estimators::{censoring_survival, AalenJohansen, StepFunction};
use crate::grid::{project_cif, CifCurve, TimeGrid};

const N_CAUSES: usize = 2;
const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_leaf_nodes: usize,
    pub min_samples_leaf: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub max_depth: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { max_leaf_nodes: 31, min_samples_leaf: 20, lambda: 1.0, max_depth: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize, gain: f64 },
    Leaf { value: f64 },
}

/// Binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Second-order gain of splitting a node into the given left/right sums.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)
}

#[derive(Debug, Clone)]
struct Split {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn better(a: &Split, b: &Split) -> Ordering {
    b.gain
        .total_cmp(&a.gain)
        .then(a.feature.cmp(&b.feature))
        .then(a.threshold.total_cmp(&b.threshold))
}

fn best_split(rows: &[usize], cols: &[Vec<f64>], grad: &[f64], hess: &[f64], cfg: &TreeConfig) -> Option<Split> {
    let n = rows.len();
    let min_leaf = cfg.min_samples_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let g_tot: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h_tot: f64 = rows.iter().map(|&r| hess[r]).sum();
    cols.par_iter()
        .enumerate()
        .filter_map(|(f, col)| {
            let mut order: Vec<usize> = rows.to_vec();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut gl = 0.0;
            let mut hl = 0.0;
            let mut best: Option<Split> = None;
            for i in 0..n - min_leaf {
                let r = order[i];
                gl += grad[r];
                hl += hess[r];
                let left = i + 1;
                if left < min_leaf {
                    continue;
                }
                let (v, next) = (col[r], col[order[i + 1]]);
                if v == next {
                    continue;
                }
                let gain = split_gain(gl, hl, g_tot - gl, h_tot - hl, cfg.lambda);
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Split { gain, feature: f, threshold: 0.5 * (v + next) });
                }
            }
            best
        })
        .min_by(better)
        .filter(|s| s.gain > 0.0)
}

/// Greedy leaf-wise tree with exact splits; leaf value `−G/(H+λ)`.
///
/// The leaf with the largest gain is split next until `max_leaf_nodes`
/// leaves exist or no admissible split has positive gain.
pub fn fit_regression_tree(x: &[Vec<f64>], grad: &[f64], hess: &[f64], cfg: &TreeConfig) -> Result<RegressionTree> {
    let n = x.len();
    if grad.len() != n || hess.len() != n {
        return Err(CoreError::Data("tree inputs, gradients and hessians must be aligned".into()));
    }
    if cfg.max_leaf_nodes == 0 {
        return Err(CoreError::Config("max_leaf_nodes must be positive".into()));
    }
    let p = x.first().map_or(0, Vec::len);
    let cols: Vec<Vec<f64>> = (0..p).map(|f| x.iter().map(|r| r[f]).collect()).collect();
    let leaf_value = |rows: &[usize]| {
        let g: f64 = rows.iter().map(|&r| grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| hess[r]).sum();
        -g / (h + cfg.lambda)
    };

    let mut nodes = vec![Node::Leaf { value: leaf_value(&(0..n).collect::<Vec<_>>()) }];
    // Open leaves: (node index, rows, depth, best split).
    let mut open: Vec<(usize, Vec<usize>, usize, Option<Split>)> = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    let s = best_split(&all, &cols, grad, hess, cfg);
    open.push((0, all, 0, s));
    let mut leaves = 1;
    while leaves < cfg.max_leaf_nodes {
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.3.as_ref().map(|s| (i, s)))
            .min_by(|a, b| better(a.1, b.1).then(open[a.0].0.cmp(&open[b.0].0)))
            .map(|(i, _)| i);
        let Some(i) = pick else { break };
        let (node, rows, depth, split) = open.swap_remove(i);
        let split = split.expect("picked leaf has a split");
        let (l_rows, r_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| cols[split.feature][r] <= split.threshold);
        let (li, ri) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: leaf_value(&l_rows) });
        nodes.push(Node::Leaf { value: leaf_value(&r_rows) });
        nodes[node] =
            Node::Split { feature: split.feature, threshold: split.threshold, left: li, right: ri, gain: split.gain };
        leaves += 1;
        let child_depth = depth + 1;
        for (idx, rs) in [(li, l_rows), (ri, r_rows)] {
            let s = if cfg.max_depth.is_some_and(|d| child_depth >= d) {
                None
            } else {
                best_split(&rs, &cols, grad, hess, cfg)
            };
            open.push((idx, rs, child_depth, s));
        }
    }
    Ok(RegressionTree { nodes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SBConfig {
    pub learning_rate: f64,
    pub max_leaf_nodes: usize,
    pub min_samples_leaf: usize,
    pub n_iterations: usize,
    /// Size of the quantile grid of event times used for training.
    pub grid_size: usize,
    /// Upper bound on inverse-probability-of-censoring weights.
    pub weight_cap: f64,
    pub lambda: f64,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for SBConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_leaf_nodes: 31,
            min_samples_leaf: 20,
            n_iterations: 100,
            grid_size: 30,
            weight_cap: 20.0,
            lambda: 1.0,
            max_depth: None,
            seed: 0,
        }
    }
}

impl SBConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.max_leaf_nodes < 2 || self.min_samples_leaf == 0 || self.grid_size == 0
        {
            return Err(CoreError::Config(
                "boosting needs a positive learning rate, max_leaf_nodes >= 2, min_samples_leaf >= 1 and a nonempty grid"
                    .into(),
            ));
        }
        if !(self.weight_cap >= 1.0) || !(self.lambda >= 0.0) {
            return Err(CoreError::Config("weight cap must be >= 1 and lambda >= 0".into()));
        }
        Ok(())
    }

    fn tree(&self) -> TreeConfig {
        TreeConfig {
            max_leaf_nodes: self.max_leaf_nodes,
            min_samples_leaf: self.min_samples_leaf,
            lambda: self.lambda,
            max_depth: self.max_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SBModel {
    pub config: SBConfig,
    pub n_features: usize,
    /// Training grid; the last input column of every tree is the grid time.
    pub train_grid: TimeGrid,
    /// Marginal Aalen–Johansen incidence per cause, the starting point of boosting.
    pub init: Vec<StepFunction>,
    pub censoring: StepFunction,
    /// `trees[m][c]` is round `m`'s tree for cause `c + 1`.
    pub trees: Vec<Vec<RegressionTree>>,
    /// Training IPCW loss over the full grid, before boosting and after each round.
    pub loss_trace: Vec<f64>,
}

/// IPCW weight and class label of one (subject, time) pair; weight 0 when censored by `t`.
fn pair_label(time: f64, cause: u8, t: f64, g: &StepFunction, cap: f64) -> (usize, f64) {
    let w = |s: f64| (1.0 / g.eval_left(s)).min(cap);
    if time <= t {
        if cause == 0 {
            (0, 0.0)
        } else {
            (cause as usize, w(time))
        }
    } else {
        (0, w(t))
    }
}

fn softmax3(f: [f64; N_CAUSES]) -> [f64; N_CAUSES + 1] {
    let m = f[0].max(f[1]).max(0.0);
    let e = [(-m).exp(), (f[0] - m).exp(), (f[1] - m).exp()];
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

fn init_logits(init: &[StepFunction], t: f64) -> [f64; N_CAUSES] {
    let p: Vec<f64> = init.iter().map(|f| f.eval(t).max(PROB_FLOOR)).collect();
    let p0 = (1.0 - init.iter().map(|f| f.eval(t)).sum::<f64>()).max(PROB_FLOOR);
    [(p[0] / p0).ln(), (p[1] / p0).ln()]
}

/// Mean IPCW multinomial log loss of CIF predictions over subjects and grid points.
///
/// At `t_k` the label is the cause if the event happened by `t_k` and "no
/// event" otherwise; each term is weighted by `min(cap, 1/Ĝ(min(T, t_k)−))`
/// and subjects censored by `t_k` contribute zero.
pub fn ipcw_log_loss(
    pred: &[CifCurve],
    time: &[f64],
    cause: &[u8],
    grid: &TimeGrid,
    censoring: &StepFunction,
    cap: f64,
) -> Result<f64> {
    let n = pred.len();
    if n == 0 || time.len() != n || cause.len() != n {
        return Err(CoreError::Data("predictions and outcomes must be nonempty and aligned".into()));
    }
    let mut total = 0.0;
    for (i, curve) in pred.iter().enumerate() {
        if curve.len() != grid.len() {
            return Err(CoreError::Data(format!("prediction {i} does not match the grid")));
        }
        for (k, &t) in grid.points().iter().enumerate() {
            let (y, w) = pair_label(time[i], cause[i], t, censoring, cap);
            if w == 0.0 {
                continue;
            }
            let p = if y == 0 { 1.0 - (0..curve.n_causes()).map(|c| curve.values[c][k]).sum::<f64>() } else { curve.at(y, k) };
            total -= w * p.clamp(PROB_FLOOR, 1.0).ln();
        }
    }
    Ok(total / (n * grid.len()) as f64)
}

impl SBModel {
    fn raw_scores(&self, x: &[f64], t: f64) -> [f64; N_CAUSES] {
        let mut f = init_logits(&self.init, t);
        let mut row = x.to_vec();
        row.push(t);
        for round in &self.trees {
            for (c, tree) in round.iter().enumerate() {
                f[c] += self.config.learning_rate * tree.predict(&row);
            }
        }
        f
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| CoreError::Data(format!("cannot serialize boosted model: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Data(format!("cannot parse boosted model: {e}")))
    }
}

/// Fits the boosted incidence model on rows `x` with outcomes `(time, cause)`.
pub fn fit_survival_boost(x: &[Vec<f64>], time: &[f64], cause: &[u8], cfg: &SBConfig) -> Result<SBModel> {
    cfg.validate()?;
    let n = x.len();
    if n == 0 || time.len() != n || cause.len() != n {
        return Err(CoreError::Data("boosting inputs must be nonempty and aligned".into()));
    }
    if cause.iter().any(|&c| c as usize > N_CAUSES) {
        return Err(CoreError::Data(format!("causes must be in 0..={N_CAUSES}")));
    }
    let p = x[0].len();
    let event_times: Vec<f64> = time.iter().zip(cause).filter(|(_, &c)| c > 0).map(|(&t, _)| t).collect();
    let train_grid = TimeGrid::quantiles(&event_times, cfg.grid_size)?;
    let aj = AalenJohansen::fit(time, cause, N_CAUSES)?;
    let init: Vec<StepFunction> = (1..=N_CAUSES).map(|c| aj.step_function(c)).collect();
    let g = censoring_survival(time, cause)?;
    let k = train_grid.len();

    // Full-grid scores for the loss trace.
    let pairs: Vec<(usize, f64, f64)> = (0..n)
        .flat_map(|i| train_grid.points().iter().map(move |&t| (i, t)))
        .map(|(i, t)| {
            let (_, w) = pair_label(time[i], cause[i], t, &g, cfg.weight_cap);
            (i, t, w)
        })
        .collect();
    let mut full: Vec<[f64; N_CAUSES]> = pairs.iter().map(|&(_, t, _)| init_logits(&init, t)).collect();
    let trace_loss = |full: &[[f64; N_CAUSES]]| -> f64 {
        pairs
            .iter()
            .zip(full)
            .map(|(&(i, t, w), f)| {
                if w == 0.0 {
                    return 0.0;
                }
                let (y, _) = pair_label(time[i], cause[i], t, &g, cfg.weight_cap);
                -w * softmax3(*f)[y].max(PROB_FLOOR).ln()
            })
            .sum::<f64>()
            / pairs.len() as f64
    };
    let mut loss_trace = vec![trace_loss(&full)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trees = Vec::with_capacity(cfg.n_iterations);
    for it in 0..cfg.n_iterations {
        let mut rows = Vec::with_capacity(n);
        let mut batch = Vec::with_capacity(n);
        for i in 0..n {
            let kk = rng.random_range(0..k);
            let t = train_grid.points()[kk];
            let (y, w) = pair_label(time[i], cause[i], t, &g, cfg.weight_cap);
            if w == 0.0 {
                continue;
            }
            let mut row = x[i].clone();
            row.push(t);
            rows.push(row);
            batch.push((i * k + kk, y, w));
        }
        if rows.is_empty() {
            return Err(CoreError::Data("every sampled pair has zero censoring weight".into()));
        }
        let probs: Vec<[f64; 3]> = batch.iter().map(|&(j, _, _)| softmax3(full[j])).collect();
        let mut round = Vec::with_capacity(N_CAUSES);
        for c in 0..N_CAUSES {
            let grad: Vec<f64> = batch
                .iter()
                .zip(&probs)
                .map(|(&(_, y, w), pr)| w * (pr[c + 1] - (y == c + 1) as u8 as f64))
                .collect();
            let hess: Vec<f64> =
                batch.iter().zip(&probs).map(|(&(_, _, w), pr)| w * pr[c + 1] * (1.0 - pr[c + 1])).collect();
            round.push(fit_regression_tree(&rows, &grad, &hess, &cfg.tree())?);
        }
        full.par_iter_mut().enumerate().for_each(|(j, f)| {
            let (i, t, _) = pairs[j];
            let mut row = x[i].clone();
            row.push(t);
            for (c, tree) in round.iter().enumerate() {
                f[c] += cfg.learning_rate * tree.predict(&row);
            }
        });
        trees.push(round);
        let l = trace_loss(&full);
        debug!("boosting round {it}: training IPCW loss {l:.6}");
        loss_trace.push(l);
    }
    info!("boosting finished: {} rounds, final loss {:.6}", cfg.n_iterations, loss_trace.last().unwrap());
    Ok(SBModel { config: cfg.clone(), n_features: p, train_grid, init, censoring: g, trees, loss_trace })
}

/// Per-cause incidence on `grid`, made monotone and mass-consistent by projection.
pub fn predict_cif_sb(model: &SBModel, x: &[f64], grid: &TimeGrid) -> CifCurve {
    let mut raw = vec![vec![0.0; grid.len()]; N_CAUSES];
    for (k, &t) in grid.points().iter().enumerate() {
        let p = softmax3(model.raw_scores(x, t));
        for c in 0..N_CAUSES {
            raw[c][k] = p[c + 1];
        }
    }
    project_cif(&raw)
}
