//! Dynamic-DeepHit: recurrent encoder, attention over the history and one
//! softmax over every (cause, bin) cell plus the mass beyond the grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use survbench_autodiff::{
    train_loop, Activation, AdditiveAttention, Dense, Graph, History, Mlp, ParamStore, Rnn, RnnKind, Tensor,
    TrainConfig, Trainable, Var,
};

use super::losses::{cumulative_operator, nll_discrete, nll_targets, ranking_loss, reconstruction_loss};
use super::{
    check_dropout, from_value, params_value, split_by_patient, to_autodiff, to_value, ModelCheckpoint, SeqBatch,
};
use crate::design::{ModelData, N_CAUSES};
use crate::error::{CoreError, Result};
use crate::grid::{CifCurve, TimeGrid};

pub const KIND: &str = "dynamic-deephit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DDHConfig {
    pub rnn_kind: RnnKind,
    pub rnn_layers: usize,
    pub rnn_hidden: usize,
    pub attention_hidden: usize,
    /// Hidden layers of each cause-specific head.
    pub cs_layers: usize,
    pub cs_hidden: usize,
    pub dropout: f64,
    /// Weight of the ranking term.
    pub alpha: f64,
    /// Weight of the reconstruction term.
    pub beta: f64,
    /// Width of the ranking kernel.
    pub sigma: f64,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

impl Default for DDHConfig {
    fn default() -> Self {
        Self {
            rnn_kind: RnnKind::Gru,
            rnn_layers: 1,
            rnn_hidden: 100,
            attention_hidden: 50,
            cs_layers: 1,
            cs_hidden: 100,
            dropout: 0.1,
            alpha: 1.0,
            beta: 0.1,
            sigma: 1.0,
            train: TrainConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl DDHConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rnn_layers == 0 || self.rnn_hidden == 0 || self.attention_hidden == 0 || self.cs_hidden == 0 {
            return Err(CoreError::Config("Dynamic-DeepHit layer counts and sizes must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.sigma > 0.0) {
            return Err(CoreError::Config("loss weights alpha, beta and sigma must be positive".into()));
        }
        check_dropout(self.dropout)
    }
}

/// Outputs of one forward pass.
pub struct DdhOutput {
    /// `B × (C·K + 1)` joint pmf.
    pub pmf: Var,
    /// `B × T` attention weights.
    pub attention: Var,
    /// Top-layer recurrent state per step.
    pub states: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DynamicDeepHit {
    pub config: DDHConfig,
    pub grid: TimeGrid,
    pub n_input: usize,
    pub n_encoded: usize,
    pub store: ParamStore,
    rnn: Rnn,
    attention: AdditiveAttention,
    heads: Vec<Mlp>,
    survival: Dense,
    recon: Dense,
}

impl DynamicDeepHit {
    pub fn new(config: &DDHConfig, n_input: usize, n_encoded: usize, grid: TimeGrid) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let h = config.rnn_hidden;
        let rnn = Rnn::new(&mut store, "rnn", config.rnn_kind, n_input, h, config.rnn_layers, config.dropout, &mut rng)?;
        let attention = AdditiveAttention::new(&mut store, "attention", h, config.attention_hidden, &mut rng)?;
        let mut sizes = vec![h + n_input];
        sizes.extend(std::iter::repeat_n(config.cs_hidden, config.cs_layers));
        sizes.push(grid.len());
        let heads = (1..=N_CAUSES)
            .map(|c| Mlp::new(&mut store, &format!("cause{c}"), &sizes, Activation::Relu, config.dropout, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let survival = Dense::new(&mut store, "survival", h + n_input, 1, &mut rng)?;
        let recon = Dense::new(&mut store, "reconstruction", h, n_encoded.max(1), &mut rng)?;
        Ok(Self { config: config.clone(), grid, n_input, n_encoded, store, rnn, attention, heads, survival, recon })
    }

    /// Forward pass on right-aligned step inputs.
    pub fn forward(&self, g: &mut Graph, steps: &[Var], masks: &[Var], valid: &Tensor) -> Result<DdhOutput> {
        let p = &self.store;
        let states = self.rnn.forward(g, p, steps, masks)?;
        let last = *states.last().ok_or_else(|| CoreError::Data("empty input sequence".into()))?;
        let (ctx, attention) = self.attention.forward(g, p, &states, last, valid)?;
        let x_last = *steps.last().expect("nonempty");
        let z = g.concat_cols(&[ctx, x_last])?;
        let mut logits = Vec::with_capacity(N_CAUSES + 1);
        for head in &self.heads {
            logits.push(head.forward(g, p, z)?);
        }
        logits.push(self.survival.forward(g, p, z)?);
        let all = g.concat_cols(&logits)?;
        Ok(DdhOutput { pmf: g.softmax_rows(all), attention, states })
    }

    fn inputs(g: &mut Graph, batch: &SeqBatch) -> (Vec<Var>, Vec<Var>) {
        let steps = batch.steps.iter().map(|t| g.constant(t.clone())).collect();
        let masks = batch.masks.iter().map(|t| g.constant(t.clone())).collect();
        (steps, masks)
    }

    /// `B × K` incidence of a 1-based cause from the joint pmf.
    pub fn cif_var(&self, g: &mut Graph, pmf: Var, cause: usize) -> Result<Var> {
        let op = g.constant(cumulative_operator(N_CAUSES, self.grid.len(), cause));
        Ok(g.matmul(pmf, op)?)
    }

    /// Mean training objective `NLL + α·Σ_c ranking_c + β·reconstruction` over records `idx`.
    pub fn loss(&self, g: &mut Graph, data: &ModelData, idx: &[usize]) -> Result<Var> {
        let batch = SeqBatch::new(data, idx);
        let (steps, masks) = Self::inputs(g, &batch);
        let out = self.forward(g, &steps, &masks, &batch.valid)?;
        let time = data.times_of(idx);
        let cause = data.causes_of(idx);
        let mut total = nll_discrete(g, out.pmf, &nll_targets(&self.grid, &time, &cause, N_CAUSES))?;
        for c in 1..=N_CAUSES {
            let cif = self.cif_var(g, out.pmf, c)?;
            let r = ranking_loss(g, cif, &self.grid, &time, &cause, c as u8, self.config.sigma)?;
            let r = g.scale(r, self.config.alpha);
            total = g.add(total, r)?;
        }
        if out.states.len() > 1 {
            let preds = out.states[..out.states.len() - 1]
                .iter()
                .map(|&h| self.recon.forward(g, &self.store, h))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let rl = reconstruction_loss(g, &preds, &batch.next_values, &batch.next_observed)?;
            let rl = g.scale(rl, self.config.beta);
            total = g.add(total, rl)?;
        }
        Ok(total)
    }

    /// Joint pmf rows in evaluation mode.
    pub fn pmf(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(256) {
            let batch = SeqBatch::new(data, chunk);
            let mut g = Graph::eval();
            let (steps, masks) = Self::inputs(&mut g, &batch);
            let o = self.forward(&mut g, &steps, &masks, &batch.valid)?;
            out.extend(g.value(o.pmf).to_rows());
        }
        Ok(out)
    }

    pub fn predict(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<CifCurve>> {
        let k = self.grid.len();
        Ok(self
            .pmf(data, idx)?
            .into_iter()
            .map(|row| {
                let values = (0..N_CAUSES)
                    .map(|c| {
                        row[c * k..(c + 1) * k]
                            .iter()
                            .scan(0.0, |acc, p| {
                                *acc += p;
                                Some(*acc)
                            })
                            .collect()
                    })
                    .collect();
                CifCurve { values }
            })
            .collect())
    }

    /// Attention over each record's own (unpadded) steps.
    pub fn attention_weights(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(256) {
            let batch = SeqBatch::new(data, chunk);
            let mut g = Graph::eval();
            let (steps, masks) = Self::inputs(&mut g, &batch);
            let o = self.forward(&mut g, &steps, &masks, &batch.valid)?;
            let a = g.value(o.attention);
            for (r, &i) in chunk.iter().enumerate() {
                let len = data.seq[i].len();
                out.push(a.row(r)[a.cols() - len..].to_vec());
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(ModelCheckpoint {
            kind: KIND.into(),
            config: to_value(&self.config)?,
            dims: vec![self.n_input, self.n_encoded],
            grid: self.grid.clone(),
            state: serde_json::Value::Null,
            params: params_value(&self.store)?,
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.kind != KIND || ckpt.dims.len() != 2 {
            return Err(CoreError::Data(format!("checkpoint of kind `{}` is not a {KIND} model", ckpt.kind)));
        }
        let cfg: DDHConfig = from_value(&ckpt.config)?;
        let mut m = Self::new(&cfg, ckpt.dims[0], ckpt.dims[1], ckpt.grid.clone())?;
        m.store.load_from(&ckpt.params_store()?)?;
        Ok(m)
    }
}

struct Fit<'a> {
    model: &'a mut DynamicDeepHit,
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

/// Trains on records `idx`, holding out a patient-level validation split for early stopping.
pub fn fit_dynamic_deephit(data: &ModelData, idx: &[usize], cfg: &DDHConfig) -> Result<(DynamicDeepHit, History)> {
    cfg.validate()?;
    let (train, val) = split_by_patient(data, idx, cfg.val_fraction, cfg.train.seed)?;
    let mut model = DynamicDeepHit::new(cfg, data.n_step(), data.layout.n_encoded(), data.grid.clone())?;
    let hist = train_loop(&mut Fit { model: &mut model, data }, &train, &val, &cfg.train)?;
    Ok((model, hist))
}
