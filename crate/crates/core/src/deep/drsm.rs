//! Deep recurrent survival machines: a recurrent encoder predicts, per cause,
//! a mixture of Weibull or log-normal event-time distributions.
//!
//! Times are divided by the mean training time before entering the
//! likelihood. Incidence curves integrate `f_c(u)·S_other(u)` numerically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use survbench_autodiff::graph::log_normal_sf;
use survbench_autodiff::{train_loop, Dense, Graph, History, ParamId, ParamStore, Rnn, RnnKind, Tensor, TrainConfig, Trainable, Var};

use super::{check_dropout, from_value, params_value, split_by_patient, to_autodiff, to_value, ModelCheckpoint, SeqBatch};
use crate::design::{ModelData, N_CAUSES};
use crate::error::{CoreError, Result};
use crate::grid::{project_cif, CifCurve, TimeGrid};

pub const KIND: &str = "drsm";
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Sub-intervals per grid interval for the incidence integral.
const REFINE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    Weibull,
    LogNormal,
}

/// One mixture component: Weibull `(shape, scale)` or log-normal `(μ, σ)` of log time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub a: f64,
    pub b: f64,
}

impl Component {
    fn log_pdf(self, dist: Distribution, t: f64) -> f64 {
        match dist {
            Distribution::Weibull => {
                let (k, lam) = (self.a, self.b);
                let z = t.ln() - lam.ln();
                k.ln() - lam.ln() + (k - 1.0) * z - (k * z).exp()
            }
            Distribution::LogNormal => {
                let z = (t.ln() - self.a) / self.b;
                -t.ln() - self.b.ln() - LN_SQRT_2PI - 0.5 * z * z
            }
        }
    }

    fn log_sf(self, dist: Distribution, t: f64) -> f64 {
        match dist {
            Distribution::Weibull => -(self.a * (t.ln() - self.b.ln())).exp(),
            Distribution::LogNormal => log_normal_sf((t.ln() - self.a) / self.b),
        }
    }
}

fn logsumexp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mixture log-likelihood of one observation: `log Σ π_m f_m(t)` for an
/// event, `log Σ π_m S_m(t)` when censored.
pub fn drsm_mixture_loglik(dist: Distribution, components: &[Component], weights: &[f64], t: f64, event: bool) -> Result<f64> {
    if !(t > 0.0) {
        return Err(CoreError::Data(format!("mixture likelihood needs a positive time, got {t}")));
    }
    if components.len() != weights.len() || components.is_empty() {
        return Err(CoreError::Data("mixture components and weights must be nonempty and aligned".into()));
    }
    Ok(logsumexp(components.iter().zip(weights).map(|(c, &w)| {
        w.ln() + if event { c.log_pdf(dist, t) } else { c.log_sf(dist, t) }
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DRSMConfig {
    pub mixtures: usize,
    pub distribution: Distribution,
    pub rnn_kind: RnnKind,
    pub rnn_layers: usize,
    pub rnn_hidden: usize,
    pub dropout: f64,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

impl Default for DRSMConfig {
    fn default() -> Self {
        Self {
            mixtures: 4,
            distribution: Distribution::Weibull,
            rnn_kind: RnnKind::Gru,
            rnn_layers: 1,
            rnn_hidden: 100,
            dropout: 0.1,
            train: TrainConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl DRSMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixtures == 0 || self.rnn_layers == 0 || self.rnn_hidden == 0 {
            return Err(CoreError::Config("DRSM needs at least one mixture component, layer and hidden unit".into()));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone)]
struct CauseHead {
    a: Dense,
    b: Dense,
    logits: Dense,
    a_base: ParamId,
    b_base: ParamId,
}

#[derive(Debug, Clone)]
pub struct Drsm {
    pub config: DRSMConfig,
    pub grid: TimeGrid,
    pub n_input: usize,
    /// Mean training time; the likelihood works on `t / time_scale`.
    pub time_scale: f64,
    pub store: ParamStore,
    rnn: Rnn,
    heads: Vec<CauseHead>,
}

/// Per-cause mixture of one record, in normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub components: Vec<Component>,
    pub weights: Vec<f64>,
}

/// Graph-side mixture parameters of one cause.
struct MixtureVars {
    /// First parameter on the log scale (Weibull) or as is (log-normal), `B × k`.
    a: Var,
    /// Log of the second parameter, `B × k`.
    log_b: Var,
    logits: Var,
}

impl Drsm {
    pub fn new(config: &DRSMConfig, n_input: usize, grid: TimeGrid, time_scale: f64) -> Result<Self> {
        config.validate()?;
        if !(time_scale > 0.0 && time_scale.is_finite()) {
            return Err(CoreError::Data(format!("time scale {time_scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let h = config.rnn_hidden;
        let k = config.mixtures;
        let rnn = Rnn::new(&mut store, "rnn", config.rnn_kind, n_input, h, config.rnn_layers, config.dropout, &mut rng)?;
        let mut heads = Vec::with_capacity(N_CAUSES);
        for c in 1..=N_CAUSES {
            heads.push(CauseHead {
                a: Dense::new(&mut store, &format!("cause{c}.a"), h, k, &mut rng)?,
                b: Dense::new(&mut store, &format!("cause{c}.b"), h, k, &mut rng)?,
                logits: Dense::new(&mut store, &format!("cause{c}.logits"), h, k, &mut rng)?,
                a_base: store.add(format!("cause{c}.a_base"), Tensor::zeros(1, k))?,
                b_base: store.add(format!("cause{c}.b_base"), Tensor::zeros(1, k))?,
            });
        }
        Ok(Self { config: config.clone(), grid, n_input, time_scale, store, rnn, heads })
    }

    /// Final recurrent state `B × H`.
    pub fn encode(&self, g: &mut Graph, steps: &[Var], masks: &[Var]) -> Result<Var> {
        let states = self.rnn.forward(g, &self.store, steps, masks)?;
        let last = *states.last().ok_or_else(|| CoreError::Data("empty input sequence".into()))?;
        Ok(g.dropout(last, self.config.dropout)?)
    }

    fn mixture_vars(&self, g: &mut Graph, z: Var, cause: usize) -> Result<MixtureVars> {
        let p = &self.store;
        let head = &self.heads[cause - 1];
        let a = head.a.forward(g, p, z)?;
        let a_base = g.param(p, head.a_base);
        let a = match self.config.distribution {
            Distribution::Weibull => {
                let t = g.tanh(a);
                g.add_row(t, a_base)?
            }
            Distribution::LogNormal => g.add_row(a, a_base)?,
        };
        let b = head.b.forward(g, p, z)?;
        let b = g.tanh(b);
        let b_base = g.param(p, head.b_base);
        let log_b = g.add_row(b, b_base)?;
        let logits = head.logits.forward(g, p, z)?;
        Ok(MixtureVars { a, log_b, logits })
    }

    /// Per-component log density and log survivor at normalized times `ln_u` (`B × 1`).
    fn component_logs(&self, g: &mut Graph, m: &MixtureVars, ln_u: Var) -> Result<(Var, Var)> {
        match self.config.distribution {
            Distribution::Weibull => {
                // a = ln k, log_b = ln λ, z = ln u − ln λ.
                let neg = g.neg(m.log_b);
                let z = g.add_col(neg, ln_u)?;
                let k = g.exp(m.a);
                let kz = g.mul(k, z)?;
                let cum = g.exp(kz);
                let log_sf = g.neg(cum);
                let km1 = g.add_scalar(k, -1.0);
                let t1 = g.mul(km1, z)?;
                let t2 = g.sub(m.a, m.log_b)?;
                let lp = g.add(t1, t2)?;
                let log_pdf = g.sub(lp, cum)?;
                Ok((log_pdf, log_sf))
            }
            Distribution::LogNormal => {
                // a = μ, log_b = ln σ, z = (ln u − μ)/σ.
                let neg = g.neg(m.a);
                let d = g.add_col(neg, ln_u)?;
                let nlb = g.neg(m.log_b);
                let inv_s = g.exp(nlb);
                let z = g.mul(d, inv_s)?;
                let log_sf = g.log_normal_sf(z);
                let z2 = g.square(z);
                let hz2 = g.scale(z2, -0.5);
                let lp = g.sub(hz2, m.log_b)?;
                let lp = g.add_scalar(lp, -LN_SQRT_2PI);
                let neg_ln_u = g.neg(ln_u);
                let log_pdf = g.add_col(lp, neg_ln_u)?;
                Ok((log_pdf, log_sf))
            }
        }
    }

    /// Mean negative log-likelihood summed over causes; other-cause events count as censored.
    pub fn nll(&self, g: &mut Graph, z: Var, time: &[f64], cause: &[u8]) -> Result<Var> {
        let b = time.len();
        let ln_u = Tensor::from_vec(b, 1, time.iter().map(|t| (t / self.time_scale).ln()).collect())?;
        let ln_u = g.constant(ln_u);
        let mut total = None;
        for c in 1..=N_CAUSES {
            let m = self.mixture_vars(g, z, c)?;
            let (log_pdf, log_sf) = self.component_logs(g, &m, ln_u)?;
            let ev = Tensor::from_vec(b, 1, cause.iter().map(|&x| (x as usize == c) as u8 as f64).collect())?;
            let ev = g.constant(ev);
            let diff = g.sub(log_pdf, log_sf)?;
            let pick = g.mul_col(diff, ev)?;
            let comp = g.add(log_sf, pick)?;
            let joint = g.add(comp, m.logits)?;
            let num = g.logsumexp_rows(joint);
            let den = g.logsumexp_rows(m.logits);
            let ll = g.sub(num, den)?;
            let s = g.sum(ll);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        let total = total.expect("at least one cause");
        Ok(g.scale(total, -1.0 / b as f64))
    }

    /// Latent incidence `1 − S_c(t)` of each record, `B × 1`, `t` in months.
    pub fn latent_incidence(&self, g: &mut Graph, z: Var, cause: usize, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(CoreError::Data(format!("horizon {t} must be positive")));
        }
        let b = g.shape(z).0;
        let ln_u = g.constant(Tensor::from_vec(b, 1, vec![(t / self.time_scale).ln(); b])?);
        let m = self.mixture_vars(g, z, cause)?;
        let (_, log_sf) = self.component_logs(g, &m, ln_u)?;
        let w = g.softmax_rows(m.logits);
        let sf = g.exp(log_sf);
        let ws = g.mul(w, sf)?;
        let s = g.sum_rows(ws);
        let neg = g.neg(s);
        Ok(g.add_scalar(neg, 1.0))
    }

    pub fn loss(&self, g: &mut Graph, data: &ModelData, idx: &[usize]) -> Result<Var> {
        let batch = SeqBatch::new(data, idx);
        let steps: Vec<Var> = batch.steps.iter().map(|t| g.constant(t.clone())).collect();
        let masks: Vec<Var> = batch.masks.iter().map(|t| g.constant(t.clone())).collect();
        let z = self.encode(g, &steps, &masks)?;
        self.nll(g, z, &data.times_of(idx), &data.causes_of(idx))
    }

    /// Fitted mixtures per record and cause, in normalized time.
    pub fn mixtures(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<Vec<Mixture>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(256) {
            let batch = SeqBatch::new(data, chunk);
            let mut g = Graph::eval();
            let steps: Vec<Var> = batch.steps.iter().map(|t| g.constant(t.clone())).collect();
            let masks: Vec<Var> = batch.masks.iter().map(|t| g.constant(t.clone())).collect();
            let z = self.encode(&mut g, &steps, &masks)?;
            let per_cause = (1..=N_CAUSES).map(|c| self.mixture_vars(&mut g, z, c)).collect::<Result<Vec<_>>>()?;
            for r in 0..chunk.len() {
                out.push(per_cause.iter().map(|m| self.mixture_row(&g, m, r)).collect());
            }
        }
        Ok(out)
    }

    fn mixture_row(&self, g: &Graph, m: &MixtureVars, r: usize) -> Mixture {
        let a = g.value(m.a).row(r);
        let lb = g.value(m.log_b).row(r);
        let lg = g.value(m.logits).row(r);
        let components = a
            .iter()
            .zip(lb)
            .map(|(&a, &lb)| match self.config.distribution {
                Distribution::Weibull => Component { a: a.exp(), b: lb.exp() },
                Distribution::LogNormal => Component { a, b: lb.exp() },
            })
            .collect();
        let mx = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lg.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        Mixture { components, weights: e.iter().map(|v| v / s).collect() }
    }

    /// Latent survivor `S_c(t)` of a record's cause mixture, `t` in months.
    pub fn survival(&self, mixture: &Mixture, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        let u = t / self.time_scale;
        mixture.components.iter().zip(&mixture.weights).map(|(c, w)| w * c.log_sf(self.config.distribution, u).exp()).sum()
    }

    fn density(&self, mixture: &Mixture, t: f64) -> f64 {
        let u = t / self.time_scale;
        mixture
            .components
            .iter()
            .zip(&mixture.weights)
            .map(|(c, w)| w * c.log_pdf(self.config.distribution, u).exp())
            .sum::<f64>()
            / self.time_scale
    }

    /// `F_c(t_k) = ∫_0^{t_k} f_c(u)·Π_{c'≠c} S_{c'}(u) du`; trapezoid rule on a
    /// refined grid, midpoint rule on the first sub-interval.
    pub fn cif(&self, mixtures: &[Mixture], grid: &TimeGrid) -> CifCurve {
        let integrand = |c: usize, u: f64| {
            let others: f64 = (0..mixtures.len()).filter(|&o| o != c).map(|o| self.survival(&mixtures[o], u)).product();
            let v = self.density(&mixtures[c], u) * others;
            if v.is_finite() { v } else { 0.0 }
        };
        let mut raw = vec![vec![0.0; grid.len()]; mixtures.len()];
        for c in 0..mixtures.len() {
            let mut acc = 0.0;
            let mut prev_t = 0.0;
            let mut prev_f = None;
            for (k, &tk) in grid.points().iter().enumerate() {
                let h = (tk - prev_t) / REFINE as f64;
                for s in 1..=REFINE {
                    let u = prev_t + h * s as f64;
                    let fu = integrand(c, u);
                    acc += match prev_f {
                        None => h * integrand(c, 0.5 * h),
                        Some(fp) => 0.5 * h * (fp + fu),
                    };
                    prev_f = Some(fu);
                }
                prev_t = tk;
                raw[c][k] = acc;
            }
        }
        project_cif(&raw)
    }

    pub fn predict(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<CifCurve>> {
        Ok(self.mixtures(data, idx)?.iter().map(|m| self.cif(m, &self.grid)).collect())
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(ModelCheckpoint {
            kind: KIND.into(),
            config: to_value(&self.config)?,
            dims: vec![self.n_input],
            grid: self.grid.clone(),
            state: to_value(&self.time_scale)?,
            params: params_value(&self.store)?,
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.kind != KIND || ckpt.dims.len() != 1 {
            return Err(CoreError::Data(format!("checkpoint of kind `{}` is not a {KIND} model", ckpt.kind)));
        }
        let cfg: DRSMConfig = from_value(&ckpt.config)?;
        let mut m = Self::new(&cfg, ckpt.dims[0], ckpt.grid.clone(), from_value(&ckpt.state)?)?;
        m.store.load_from(&ckpt.params_store()?)?;
        Ok(m)
    }
}

struct Fit<'a> {
    model: &'a mut Drsm,
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

pub fn fit_drsm(data: &ModelData, idx: &[usize], cfg: &DRSMConfig) -> Result<(Drsm, History)> {
    cfg.validate()?;
    let times = data.times_of(idx);
    if times.is_empty() {
        return Err(CoreError::Data("no training records".into()));
    }
    let scale = times.iter().sum::<f64>() / times.len() as f64;
    let (train, val) = split_by_patient(data, idx, cfg.val_fraction, cfg.train.seed)?;
    let mut model = Drsm::new(cfg, data.n_step(), data.grid.clone(), scale)?;
    let hist = train_loop(&mut Fit { model: &mut model, data }, &train, &val, &cfg.train)?;
    Ok((model, hist))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_reference_values() {
        let c = [Component { a: 1.0, b: 1.0 }];
        let f = drsm_mixture_loglik(Distribution::Weibull, &c, &[1.0], 1.0, true).unwrap();
        let s = drsm_mixture_loglik(Distribution::Weibull, &c, &[1.0], 1.0, false).unwrap();
        assert!((f + 1.0).abs() < 1e-15 && (s + 1.0).abs() < 1e-15);
        assert!(drsm_mixture_loglik(Distribution::Weibull, &c, &[1.0], 0.0, true).is_err());
    }

    #[test]
    fn degenerate_mixtures_match_single_component() {
        for dist in [Distribution::Weibull, Distribution::LogNormal] {
            let one = Component { a: 1.7, b: 0.8 };
            let other = Component { a: 0.6, b: 2.5 };
            for event in [true, false] {
                let single = drsm_mixture_loglik(dist, &[one], &[1.0], 2.3, event).unwrap();
                let twice = drsm_mixture_loglik(dist, &[one, one], &[0.5, 0.5], 2.3, event).unwrap();
                let forced = drsm_mixture_loglik(dist, &[one, other], &[1.0, 0.0], 2.3, event).unwrap();
                assert!((single - twice).abs() < 1e-14);
                assert_eq!(single, forced);
            }
        }
    }
}
