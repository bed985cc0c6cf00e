//! SurvTRACE-lite: one token per snapshot feature, a self-attention
//! encoder, and discrete competing hazards per grid bin.
//!
//! In bin `k` the outcome probabilities are a softmax over
//! `[0, l_1k, l_2k]` (no event, cause 1, cause 2).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use survbench_autodiff::{
    train_loop, Activation, Embedding, Graph, History, LayerNorm, Mlp, MultiHeadSelfAttention, ParamId,
    ParamStore, Tensor, TrainConfig, Trainable, Var,
};

use super::losses::event_bin;
use super::{check_dropout, from_value, params_value, split_by_patient, to_autodiff, to_value, ModelCheckpoint};
use crate::design::{ModelData, N_CAUSES};
use crate::error::{CoreError, Result};
use crate::estimators::{censoring_survival, StepFunction};
use crate::grid::{CifCurve, TimeGrid};

pub const KIND: &str = "survtrace";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurvTraceConfig {
    pub layers: usize,
    pub embedding: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Upper bound on the inverse censoring weights.
    pub weight_cap: f64,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

impl Default for SurvTraceConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            embedding: 24,
            intermediate: 32,
            heads: 3,
            dropout: 0.1,
            weight_cap: 20.0,
            train: TrainConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl SurvTraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.embedding == 0 || self.intermediate == 0 || self.heads == 0 {
            return Err(CoreError::Config("SurvTRACE sizes must be positive".into()));
        }
        if self.embedding % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "embedding size {} is not divisible by {} attention heads",
                self.embedding, self.heads
            )));
        }
        if !(self.weight_cap >= 1.0) {
            return Err(CoreError::Config("weight cap must be >= 1".into()));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: MultiHeadSelfAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct SurvTrace {
    pub config: SurvTraceConfig,
    pub grid: TimeGrid,
    pub n_numeric: usize,
    pub vocab_sizes: Vec<usize>,
    /// Censoring survival of the training records, for the loss weights.
    pub censoring: StepFunction,
    pub store: ParamStore,
    numeric_w: Vec<ParamId>,
    numeric_b: Vec<ParamId>,
    categorical: Vec<Embedding>,
    layers: Vec<EncoderLayer>,
    heads: Vec<Mlp>,
}

/// Per-record constants of the weighted likelihood.
struct Targets {
    /// Bins whose hazard the record survived or failed in (`j ≤ k*`).
    exposure: Tensor,
    /// One-hot event cell per cause.
    event: Vec<Tensor>,
    weight: Tensor,
}

impl SurvTrace {
    pub fn new(
        config: &SurvTraceConfig,
        n_numeric: usize,
        vocab_sizes: &[usize],
        grid: TimeGrid,
        censoring: StepFunction,
    ) -> Result<Self> {
        config.validate()?;
        if n_numeric + vocab_sizes.len() == 0 {
            return Err(CoreError::Config("SurvTRACE needs at least one input feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let e = config.embedding;
        let mut numeric_w = Vec::with_capacity(n_numeric);
        let mut numeric_b = Vec::with_capacity(n_numeric);
        for j in 0..n_numeric {
            numeric_w.push(store.add_uniform(format!("numeric{j}.w"), 1, e, 1, &mut rng)?);
            numeric_b.push(store.add(format!("numeric{j}.b"), Tensor::zeros(1, e))?);
        }
        let categorical = vocab_sizes
            .iter()
            .enumerate()
            .map(|(j, &v)| Embedding::new(&mut store, &format!("categorical{j}"), v.max(1), e, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(EncoderLayer {
                attention: MultiHeadSelfAttention::new(&mut store, &format!("encoder{l}.attention"), e, config.heads, &mut rng)?,
                norm1: LayerNorm::new(&mut store, &format!("encoder{l}.norm1"), e)?,
                ffn: Mlp::new(
                    &mut store,
                    &format!("encoder{l}.ffn"),
                    &[e, config.intermediate, e],
                    Activation::Relu,
                    config.dropout,
                    &mut rng,
                )?,
                norm2: LayerNorm::new(&mut store, &format!("encoder{l}.norm2"), e)?,
            });
        }
        let heads = (1..=N_CAUSES)
            .map(|c| {
                Mlp::new(&mut store, &format!("cause{c}"), &[e, config.intermediate, grid.len()], Activation::Relu, 0.0, &mut rng)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            config: config.clone(),
            grid,
            n_numeric,
            vocab_sizes: vocab_sizes.to_vec(),
            censoring,
            store,
            numeric_w,
            numeric_b,
            categorical,
            layers,
            heads,
        })
    }

    fn n_tokens(&self) -> usize {
        self.n_numeric + self.vocab_sizes.len()
    }

    /// Per-cause bin logits, each `B × K`.
    pub fn forward(&self, g: &mut Graph, numeric: Var, categorical: &[Vec<usize>]) -> Result<Vec<Var>> {
        let p = &self.store;
        let b = g.shape(numeric).0;
        let mut tokens = Vec::with_capacity(self.n_tokens());
        for j in 0..self.n_numeric {
            let col = g.slice_cols(numeric, j, 1)?;
            let w = g.param(p, self.numeric_w[j]);
            let t = g.matmul(col, w)?;
            let bias = g.param(p, self.numeric_b[j]);
            tokens.push(g.add_row(t, bias)?);
        }
        for (j, emb) in self.categorical.iter().enumerate() {
            let codes: Vec<usize> = categorical.iter().map(|row| row[j]).collect();
            tokens.push(emb.forward(g, p, &codes)?);
        }
        let n_tok = tokens.len();
        let stacked = if n_tok == 1 { tokens[0] } else { g.concat_rows(&tokens)? };
        // Token-major rows to per-record blocks.
        let order: Vec<usize> = (0..b).flat_map(|i| (0..n_tok).map(move |t| t * b + i)).collect();
        let mut x = g.gather_rows(stacked, &order)?;
        for layer in &self.layers {
            let a = layer.attention.forward(g, p, x, b)?;
            let a = g.dropout(a, self.config.dropout)?;
            let r = g.add(x, a)?;
            x = layer.norm1.forward(g, p, r)?;
            let f = layer.ffn.forward(g, p, x)?;
            let f = g.dropout(f, self.config.dropout)?;
            let r = g.add(x, f)?;
            x = layer.norm2.forward(g, p, r)?;
        }
        let pooled = g.group_sum_rows(x, b)?;
        let pooled = g.scale(pooled, 1.0 / n_tok as f64);
        self.heads.iter().map(|h| Ok(h.forward(g, p, pooled)?)).collect()
    }

    fn targets(&self, time: &[f64], cause: &[u8]) -> Targets {
        let k = self.grid.len();
        let b = time.len();
        let mut exposure = Tensor::zeros(b, k);
        let mut event = vec![Tensor::zeros(b, k); N_CAUSES];
        let mut weight = Tensor::zeros(b, 1);
        for i in 0..b {
            let last = match event_bin(&self.grid, time[i], cause[i]) {
                Some(bin) => {
                    event[cause[i] as usize - 1].set(i, bin, 1.0);
                    bin
                }
                None => self.grid.bin(time[i]).unwrap_or(k - 1),
            };
            for j in 0..=last {
                exposure.set(i, j, 1.0);
            }
            weight.set(i, 0, (1.0 / self.censoring.eval_left(time[i])).min(self.config.weight_cap));
        }
        Targets { exposure, event, weight }
    }

    /// Weighted discrete negative log-likelihood given explicit per-record weights.
    pub fn weighted_nll(&self, g: &mut Graph, logits: &[Var], time: &[f64], cause: &[u8], weight: Option<&[f64]>) -> Result<Var> {
        let mut t = self.targets(time, cause);
        if let Some(w) = weight {
            t.weight = Tensor::from_vec(w.len(), 1, w.to_vec())?;
        }
        let mut denom = None;
        for &l in logits {
            let e = g.exp(l);
            denom = Some(match denom {
                None => e,
                Some(d) => g.add(d, e)?,
            });
        }
        let denom = g.add_scalar(denom.expect("at least one cause"), 1.0);
        let lse = g.ln(denom);
        let ex = g.constant(t.exposure);
        let surv = g.mul(lse, ex)?;
        let mut per = g.sum_rows(surv);
        for (&l, ev) in logits.iter().zip(t.event) {
            let ev = g.constant(ev);
            let hit = g.mul(l, ev)?;
            let hit = g.sum_rows(hit);
            per = g.sub(per, hit)?;
        }
        let w = g.constant(t.weight);
        let weighted = g.mul(per, w)?;
        Ok(g.mean(weighted))
    }

    pub fn loss(&self, g: &mut Graph, data: &ModelData, idx: &[usize]) -> Result<Var> {
        let numeric = g.constant(super::rows_tensor(&data.numeric, idx));
        let cats: Vec<Vec<usize>> = idx.iter().map(|&i| data.categorical[i].clone()).collect();
        let logits = self.forward(g, numeric, &cats)?;
        self.weighted_nll(g, &logits, &data.times_of(idx), &data.causes_of(idx), None)
    }

    /// Per-cause discrete hazards `h_c(t_k)` for records `idx`.
    pub fn hazards(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(512) {
            let mut g = Graph::eval();
            let numeric = g.constant(super::rows_tensor(&data.numeric, chunk));
            let cats: Vec<Vec<usize>> = chunk.iter().map(|&i| data.categorical[i].clone()).collect();
            let logits = self.forward(&mut g, numeric, &cats)?;
            let vals: Vec<&Tensor> = logits.iter().map(|&l| g.value(l)).collect();
            for r in 0..chunk.len() {
                let mut h = vec![vec![0.0; self.grid.len()]; N_CAUSES];
                for k in 0..self.grid.len() {
                    let m = vals.iter().map(|v| v.get(r, k)).fold(0.0, f64::max);
                    let e: Vec<f64> = vals.iter().map(|v| (v.get(r, k) - m).exp()).collect();
                    let s = (-m).exp() + e.iter().sum::<f64>();
                    for c in 0..N_CAUSES {
                        h[c][k] = e[c] / s;
                    }
                }
                out.push(h);
            }
        }
        Ok(out)
    }

    /// `F_c(t_k) = Σ_{j≤k} S(t_{j−1}) h_c(t_j)`.
    pub fn predict(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<CifCurve>> {
        Ok(self.hazards(data, idx)?.into_iter().map(|h| compose_hazards(&h)).collect())
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let mut dims = vec![self.n_numeric];
        dims.extend(&self.vocab_sizes);
        Ok(ModelCheckpoint {
            kind: KIND.into(),
            config: to_value(&self.config)?,
            dims,
            grid: self.grid.clone(),
            state: to_value(&self.censoring)?,
            params: params_value(&self.store)?,
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.kind != KIND || ckpt.dims.is_empty() {
            return Err(CoreError::Data(format!("checkpoint of kind `{}` is not a {KIND} model", ckpt.kind)));
        }
        let cfg: SurvTraceConfig = from_value(&ckpt.config)?;
        let mut m = Self::new(&cfg, ckpt.dims[0], &ckpt.dims[1..], ckpt.grid.clone(), from_value(&ckpt.state)?)?;
        m.store.load_from(&ckpt.params_store()?)?;
        Ok(m)
    }
}

/// Composes per-cause discrete hazards into incidence curves.
pub fn compose_hazards(h: &[Vec<f64>]) -> CifCurve {
    let k = h.first().map_or(0, Vec::len);
    let mut values = vec![vec![0.0; k]; h.len()];
    let mut s = 1.0;
    let mut acc = vec![0.0; h.len()];
    for j in 0..k {
        let total: f64 = h.iter().map(|hc| hc[j]).sum();
        for c in 0..h.len() {
            acc[c] += s * h[c][j];
            values[c][j] = acc[c];
        }
        s *= 1.0 - total;
    }
    CifCurve { values }
}

struct Fit<'a> {
    model: &'a mut SurvTrace,
    data: &'a ModelData,
}

impl Trainable for Fit<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn batch_loss(&self, g: &mut Graph, batch: &[usize]) -> survbench_autodiff::Result<Var> {
        self.model.loss(g, self.data, batch).map_err(to_autodiff)
    }
}

pub fn fit_survtrace(data: &ModelData, idx: &[usize], cfg: &SurvTraceConfig) -> Result<(SurvTrace, History)> {
    cfg.validate()?;
    let censoring = censoring_survival(&data.times_of(idx), &data.causes_of(idx))?;
    let (train, val) = split_by_patient(data, idx, cfg.val_fraction, cfg.train.seed)?;
    let n_numeric = data.numeric.first().map_or(0, Vec::len);
    let mut model = SurvTrace::new(cfg, n_numeric, &data.vocab_sizes, data.grid.clone(), censoring)?;
    let hist = train_loop(&mut Fit { model: &mut model, data }, &train, &val, &cfg.train)?;
    Ok((model, hist))
}
