//! Neural survival models built on the autodiff crate.

pub mod ddh;
pub mod drsm;
pub mod losses;
pub mod pseudo;
pub mod survtrace;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use survbench_autodiff::Tensor;

use crate::design::ModelData;
use crate::error::{CoreError, Result};

/// Right-aligned (left-padded) sequences of a batch of records.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    /// `steps[t]` is `B × p`; padded rows are zero.
    pub steps: Vec<Tensor>,
    /// `masks[t]` is `B × 1`, 1 where step `t` is real.
    pub masks: Vec<Tensor>,
    /// `B × T` copy of the masks.
    pub valid: Tensor,
    /// Encoded values of step `t + 1`, `B × q`, for `t < T − 1`.
    pub next_values: Vec<Tensor>,
    /// 1 where step `t + 1` exists and its entry was observed.
    pub next_observed: Vec<Tensor>,
}

impl SeqBatch {
    pub fn new(data: &ModelData, idx: &[usize]) -> Self {
        let b = idx.len();
        let p = data.n_step();
        let q = data.layout.n_encoded();
        let t_max = idx.iter().map(|&i| data.seq[i].len()).max().unwrap_or(0);
        let mut steps = vec![Tensor::zeros(b, p); t_max];
        let mut masks = vec![Tensor::zeros(b, 1); t_max];
        let mut valid = Tensor::zeros(b, t_max);
        let mut next_values = vec![Tensor::zeros(b, q); t_max.saturating_sub(1)];
        let mut next_observed = vec![Tensor::zeros(b, q); t_max.saturating_sub(1)];
        for (r, &i) in idx.iter().enumerate() {
            let seq = &data.seq[i];
            let off = t_max - seq.len();
            for (s, row) in seq.iter().enumerate() {
                let t = off + s;
                for (j, &v) in row.iter().enumerate() {
                    steps[t].set(r, j, v);
                }
                masks[t].set(r, 0, 1.0);
                valid.set(r, t, 1.0);
                if s > 0 {
                    for j in 0..q {
                        next_values[t - 1].set(r, j, row[j]);
                        next_observed[t - 1].set(r, j, data.seq_mask[i][s][j] as u8 as f64);
                    }
                }
            }
        }
        Self { steps, masks, valid, next_values, next_observed }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Splits records into training and validation parts by patient, so both
/// transitions of one patient land on the same side.
pub fn split_by_patient(data: &ModelData, idx: &[usize], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CoreError::Config(format!("validation fraction {val_fraction} must lie in (0, 1)")));
    }
    let mut patients: Vec<usize> = idx.iter().map(|&i| data.patient[i]).collect::<BTreeSet<_>>().into_iter().collect();
    if patients.len() < 2 {
        return Err(CoreError::Data("need at least two patients to carve out a validation split".into()));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((patients.len() as f64 * val_fraction).round() as usize).clamp(1, patients.len() - 1);
    let val: BTreeSet<usize> = patients[..n_val].iter().copied().collect();
    let (v, t): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| val.contains(&data.patient[i]));
    Ok((t, v))
}

/// Gathers the rows of a per-record matrix into a tensor.
pub(crate) fn rows_tensor(rows: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let cols = idx.first().map_or(0, |&i| rows[i].len());
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::from_vec(idx.len(), cols, data).expect("rows share a width")
}

/// Architecture descriptor plus named parameter arrays.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelCheckpoint {
    pub kind: String,
    pub config: serde_json::Value,
    /// Model-specific sizes needed to rebuild the architecture.
    pub dims: Vec<usize>,
    pub grid: crate::grid::TimeGrid,
    /// Fitted non-parameter state (normalizers, censoring curves).
    pub state: serde_json::Value,
    pub params: serde_json::Value,
}

impl ModelCheckpoint {
    pub(crate) fn params_store(&self) -> Result<survbench_autodiff::ParamStore> {
        Ok(survbench_autodiff::ParamStore::from_json(&self.params.to_string())?)
    }
}

pub(crate) fn params_value(store: &survbench_autodiff::ParamStore) -> Result<serde_json::Value> {
    serde_json::from_str(&store.to_json()?).map_err(|e| CoreError::Data(format!("checkpoint encoding failed: {e}")))
}

pub(crate) fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| CoreError::Data(format!("checkpoint encoding failed: {e}")))
}

pub(crate) fn from_value<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| CoreError::Data(format!("malformed checkpoint: {e}")))
}

/// Converts a model error for the autodiff training loop.
pub(crate) fn to_autodiff(e: CoreError) -> survbench_autodiff::AutodiffError {
    match e {
        CoreError::Autodiff(a) => a,
        other => survbench_autodiff::AutodiffError::Training(other.to_string()),
    }
}

pub(crate) fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::Config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    Ok(())
}
