//! Mini-batch training with early stopping on a validation split.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::optim::Adam;
use crate::params::ParamStore;

/// A model that can score a batch of example indices.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Mean loss over `batch` (indices into the model's training data).
    fn batch_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 70, patience: 10, batch_size: 256, lr: Adam::DEFAULT_LR, clip_norm: Some(5.0), seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub clipped_steps: usize,
}

/// Mean loss over `idx` in evaluation mode, batched.
pub fn evaluate<M: Trainable + ?Sized>(model: &M, idx: &[usize], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut g = Graph::eval();
        let l = model.batch_loss(&mut g, chunk)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Trains with Adam; restores the parameters of the best validation epoch.
pub fn train_loop<M: Trainable + ?Sized>(model: &mut M, train: &[usize], val: &[usize], cfg: &TrainConfig) -> Result<History> {
    if val.is_empty() {
        return Err(AutodiffError::Training("empty validation split".into()));
    }
    if train.is_empty() {
        return Err(AutodiffError::Training("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(AutodiffError::Training("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut order = train.to_vec();
    let mut hist = History { best_val_loss: f64::INFINITY, ..History::default() };
    let mut best = model.params().tensors().to_vec();
    let mut since_best = 0;
    let mut step_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step_seed = step_seed.wrapping_add(1);
            let mut g = Graph::train(step_seed);
            let loss = model.batch_loss(&mut g, batch)?;
            epoch_loss += g.value(loss).item() * batch.len() as f64;
            g.backward(loss)?;
            let mut grads = g.param_grads(model.params())?;
            if let Some(max) = cfg.clip_norm {
                if grads.clip_global_norm(max) {
                    hist.clipped_steps += 1;
                    debug!("epoch {epoch}: gradient clipped to global norm {max}");
                }
            }
            adam.update(model.params_mut(), &grads)?;
        }
        hist.train_loss.push(epoch_loss / order.len() as f64);
        let v = evaluate(model, val, cfg.batch_size)?;
        hist.val_loss.push(v);
        if v < hist.best_val_loss {
            hist.best_val_loss = v;
            hist.best_epoch = epoch;
            best = model.params().tensors().to_vec();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                hist.stopped_early = true;
                break;
            }
        }
    }
    if hist.clipped_steps > 0 {
        info!("gradient clipping triggered on {} steps", hist.clipped_steps);
    }
    model.params_mut().set_all(best)?;
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Least squares `y ≈ w x` on fixed data.
    struct Line {
        store: ParamStore,
        xs: Vec<f64>,
        ys: Vec<f64>,
    }

    impl Line {
        fn new(noise_flip: bool) -> Self {
            let mut store = ParamStore::new();
            store.add("w", Tensor::scalar(0.0)).unwrap();
            let xs: Vec<f64> = (0..40).map(|i| i as f64 / 10.0).collect();
            let ys = xs.iter().enumerate().map(|(i, x)| 2.0 * x + if noise_flip && i % 2 == 0 { 0.3 } else { 0.0 }).collect();
            Self { store, xs, ys }
        }
    }

    impl Trainable for Line {
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn batch_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<Var> {
            let w = g.param(&self.store, self.store.id("w").unwrap());
            let x = g.constant(Tensor::from_vec(batch.len(), 1, batch.iter().map(|&i| self.xs[i]).collect())?);
            let y = g.constant(Tensor::from_vec(batch.len(), 1, batch.iter().map(|&i| self.ys[i]).collect())?);
            let p = g.matmul(x, w)?;
            let d = g.sub(p, y)?;
            let s = g.square(d);
            Ok(g.mean(s))
        }
    }

    fn idx(r: std::ops::Range<usize>) -> Vec<usize> {
        r.collect()
    }

    #[test]
    fn empty_validation_is_an_error() {
        let mut m = Line::new(false);
        assert!(train_loop(&mut m, &idx(0..30), &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn history_is_capped_at_max_epochs() {
        let mut m = Line::new(false);
        let cfg = TrainConfig { lr: 1e-3, patience: 1000, batch_size: 8, ..TrainConfig::default() };
        let h = train_loop(&mut m, &idx(0..30), &idx(30..40), &cfg).unwrap();
        assert_eq!(h.val_loss.len(), 70);
        assert!(h.val_loss.len() <= 70);
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        let mut m = Line::new(true);
        let cfg = TrainConfig { lr: 0.5, patience: 0, batch_size: 4, max_epochs: 70, ..TrainConfig::default() };
        let h = train_loop(&mut m, &idx(0..30), &idx(30..40), &cfg).unwrap();
        let n = h.val_loss.len();
        assert!(h.stopped_early);
        assert!(h.val_loss[n - 1] >= h.best_val_loss);
        // every epoch before the last improved on its predecessor
        for k in 1..n - 1 {
            assert!(h.val_loss[k] < h.val_loss[k - 1]);
        }
    }

    #[test]
    fn best_parameters_are_restored() {
        let mut m = Line::new(true);
        let cfg = TrainConfig { lr: 0.5, patience: 5, batch_size: 4, ..TrainConfig::default() };
        let h = train_loop(&mut m, &idx(0..30), &idx(30..40), &cfg).unwrap();
        let v = evaluate(&m, &idx(30..40), 256).unwrap();
        assert!((v - h.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { lr: 1e-2, batch_size: 7, max_epochs: 15, seed: 11, ..TrainConfig::default() };
        let mut a = Line::new(true);
        let mut b = Line::new(true);
        let ha = train_loop(&mut a, &idx(0..30), &idx(30..40), &cfg).unwrap();
        let hb = train_loop(&mut b, &idx(0..30), &idx(30..40), &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.store.tensors(), b.store.tensors());
    }
}
