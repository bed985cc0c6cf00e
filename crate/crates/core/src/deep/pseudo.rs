//! DeepPseudo: a shared perceptron with per-cause heads regressing
//! jackknife pseudo-values of the incidence on the grid.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use survbench_autodiff::{train_loop, Activation, Dense, Graph, History, Mlp, ParamStore, Tensor, TrainConfig, Trainable, Var};

use super::{check_dropout, from_value, params_value, rows_tensor, split_by_patient, to_autodiff, to_value, ModelCheckpoint};
use crate::design::{ModelData, N_CAUSES};
use crate::error::{CoreError, Result};
use crate::estimators::{jackknife_pseudo, PseudoValueMatrix};
use crate::grid::{project_cif, CifCurve, TimeGrid};

pub const KIND: &str = "deep-pseudo";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    /// Widths of the shared hidden layers; empty gives a linear model.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            dropout: 0.1,
            train: TrainConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(CoreError::Config("DeepPseudo hidden layer sizes must be positive".into()));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone)]
pub struct DeepPseudo {
    pub config: PseudoConfig,
    pub grid: TimeGrid,
    pub n_input: usize,
    pub store: ParamStore,
    shared: Option<Mlp>,
    heads: Vec<Dense>,
}

impl DeepPseudo {
    pub fn new(config: &PseudoConfig, n_input: usize, grid: TimeGrid) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let (shared, width) = if config.hidden.is_empty() {
            (None, n_input)
        } else {
            let mut sizes = vec![n_input];
            sizes.extend(&config.hidden);
            let mlp = Mlp::new(&mut store, "shared", &sizes, config.activation, config.dropout, &mut rng)?
                .with_output_activation(config.activation);
            (Some(mlp), *config.hidden.last().unwrap())
        };
        let heads = (1..=N_CAUSES)
            .map(|c| Dense::new(&mut store, &format!("cause{c}"), width, grid.len(), &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { config: config.clone(), grid, n_input, store, shared, heads })
    }

    /// Raw `B × (C·K)` outputs, cause-major.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = match &self.shared {
            Some(m) => {
                let z = m.forward(g, &self.store, x)?;
                g.dropout(z, self.config.dropout)?
            }
            None => x,
        };
        let outs = self.heads.iter().map(|h| h.forward(g, &self.store, z)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(g.concat_cols(&outs)?)
    }

    /// Mean squared error against the pseudo-value rows `targets` (aligned with `idx`).
    pub fn loss(&self, g: &mut Graph, data: &ModelData, idx: &[usize], targets: &Tensor) -> Result<Var> {
        let x = g.constant(rows_tensor(&data.snapshot, idx));
        let y = g.constant(targets.clone());
        let pred = self.forward(g, x)?;
        let d = g.sub(pred, y)?;
        let d2 = g.square(d);
        Ok(g.mean(d2))
    }

    /// Raw regression outputs, before projection.
    pub fn raw(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(1024) {
            let mut g = Graph::eval();
            let x = g.constant(rows_tensor(&data.snapshot, chunk));
            let y = self.forward(&mut g, x)?;
            out.extend(g.value(y).to_rows());
        }
        Ok(out)
    }

    pub fn predict(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<CifCurve>> {
        let k = self.grid.len();
        Ok(self
            .raw(data, idx)?
            .into_iter()
            .map(|row| project_cif(&(0..N_CAUSES).map(|c| row[c * k..(c + 1) * k].to_vec()).collect::<Vec<_>>()))
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(ModelCheckpoint {
            kind: KIND.into(),
            config: to_value(&self.config)?,
            dims: vec![self.n_input],
            grid: self.grid.clone(),
            state: serde_json::Value::Null,
            params: params_value(&self.store)?,
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.kind != KIND || ckpt.dims.len() != 1 {
            return Err(CoreError::Data(format!("checkpoint of kind `{}` is not a {KIND} model", ckpt.kind)));
        }
        let cfg: PseudoConfig = from_value(&ckpt.config)?;
        let mut m = Self::new(&cfg, ckpt.dims[0], ckpt.grid.clone())?;
        m.store.load_from(&ckpt.params_store()?)?;
        Ok(m)
    }
}

struct Fit<'a> {
    model: &'a mut DeepPseudo,
    data: &'a ModelData,
    row_of: HashMap<usize, usize>,
    pseudo: &'a PseudoValueMatrix,
}

impl Trainable for Fit<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn batch_loss(&self, g: &mut Graph, batch: &[usize]) -> survbench_autodiff::Result<Var> {
        let rows: Vec<Vec<f64>> = batch.iter().map(|i| self.pseudo.subject_row(self.row_of[i])).collect();
        let targets = Tensor::from_rows(&rows)?;
        self.model.loss(g, self.data, batch, &targets).map_err(to_autodiff)
    }
}

/// Pseudo-values of records `idx` on the data grid.
pub fn pseudo_values(data: &ModelData, idx: &[usize]) -> Result<PseudoValueMatrix> {
    jackknife_pseudo(&data.times_of(idx), &data.causes_of(idx), N_CAUSES, &data.grid)
}

/// Trains on records `idx`; `pseudo` row `r` belongs to record `idx[r]`.
pub fn fit_deep_pseudo(
    data: &ModelData,
    idx: &[usize],
    pseudo: &PseudoValueMatrix,
    cfg: &PseudoConfig,
) -> Result<(DeepPseudo, History)> {
    cfg.validate()?;
    if pseudo.grid != data.grid || pseudo.n_causes != N_CAUSES {
        return Err(CoreError::Config("pseudo-values were computed on a different grid or cause set".into()));
    }
    if pseudo.n != idx.len() {
        return Err(CoreError::Data(format!("{} pseudo-value rows for {} records", pseudo.n, idx.len())));
    }
    let row_of: HashMap<usize, usize> = idx.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let (train, val) = split_by_patient(data, idx, cfg.val_fraction, cfg.train.seed)?;
    let mut model = DeepPseudo::new(cfg, data.n_snapshot(), data.grid.clone())?;
    let hist = train_loop(&mut Fit { model: &mut model, data, row_of, pseudo }, &train, &val, &cfg.train)?;
    Ok((model, hist))
}
