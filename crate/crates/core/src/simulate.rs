//! Synthetic illness–death cohorts with Weibull proportional-hazards transitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, FeatureMeta, Outcome, PatientSequence, RiskMode, SecondEvent};
use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;

pub const STATIC_NAMES: [&str; 2] = ["age", "sex"];

/// Coefficients on per-feature trajectory summaries; empty vectors mean zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryEffects {
    pub last: Vec<f64>,
    pub mean: Vec<f64>,
    pub slope: Vec<f64>,
}

/// `α(t | x) = (k/λ)(t/λ)^{k−1} exp(β·s + γ·summary)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullHazard {
    pub shape: f64,
    pub scale: f64,
    /// Coefficients on the static covariates (age, sex).
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub gamma: TrajectoryEffects,
}

impl WeibullHazard {
    pub fn exponential(rate: f64) -> Self {
        Self { shape: 1.0, scale: 1.0 / rate, beta: Vec::new(), gamma: TrajectoryEffects::default() }
    }

    fn validate(&self, name: &str, d: usize) -> Result<()> {
        if !(self.shape > 0.0 && self.shape.is_finite()) || !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CoreError::Config(format!("{name}: Weibull shape and scale must be positive")));
        }
        if !self.beta.is_empty() && self.beta.len() != STATIC_NAMES.len() {
            return Err(CoreError::Config(format!("{name}: beta needs {} entries", STATIC_NAMES.len())));
        }
        for (label, v) in [("last", &self.gamma.last), ("mean", &self.gamma.mean), ("slope", &self.gamma.slope)] {
            if !v.is_empty() && v.len() != d {
                return Err(CoreError::Config(format!("{name}: gamma.{label} needs {d} entries")));
            }
        }
        Ok(())
    }

    pub fn linear_predictor(&self, statics: &[f64], summary: &[TrajectorySummary]) -> f64 {
        let dot = |w: &[f64], f: &dyn Fn(&TrajectorySummary) -> f64| -> f64 {
            w.iter().zip(summary).map(|(w, s)| w * f(s)).sum()
        };
        self.beta.iter().zip(statics).map(|(b, s)| b * s).sum::<f64>()
            + dot(&self.gamma.last, &|s| s.last)
            + dot(&self.gamma.mean, &|s| s.mean)
            + dot(&self.gamma.slope, &|s| s.slope)
    }

    pub fn cumulative(&self, t: f64, eta: f64) -> f64 {
        (t / self.scale).powf(self.shape) * eta.exp()
    }

    pub fn hazard(&self, t: f64, eta: f64) -> f64 {
        self.shape / self.scale * (t / self.scale).powf(self.shape - 1.0) * eta.exp()
    }

    /// Inverse-transform draw from the conditional Weibull law.
    fn sample<R: Rng>(&self, eta: f64, rng: &mut R) -> f64 {
        let e: f64 = Exp1.sample(rng);
        self.scale * (e * (-eta).exp()).powf(1.0 / self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Longitudinal {
    /// Random-walk innovation standard deviation.
    pub step_std: f64,
    /// Mean per-month drift of each feature; empty means zero.
    pub drift: Vec<f64>,
    /// Between-subject spread of the drift.
    pub drift_std: f64,
    /// Spread of the starting level.
    pub init_std: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a feature is recorded in a given month.
    pub obs_prob: f64,
}

impl Default for Longitudinal {
    fn default() -> Self {
        Self { step_std: 0.1, drift: Vec::new(), drift_std: 0.1, init_std: 1.0, min_len: 6, max_len: 24, obs_prob: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub d: usize,
    pub h01: WeibullHazard,
    pub h02: WeibullHazard,
    pub h12: WeibullHazard,
    #[serde(default)]
    pub longitudinal: Longitudinal,
    /// Exponential censoring rate; 0 disables random censoring.
    #[serde(default)]
    pub censoring_rate: f64,
    /// Administrative end of follow-up (months after the sequence ends).
    pub horizon: f64,
    /// Number of monthly grid points; defaults to the horizon in months.
    #[serde(default)]
    pub grid_size: Option<usize>,
    #[serde(default = "half")]
    pub sex_prob: f64,
    pub seed: u64,
}

fn half() -> f64 {
    0.5
}

/// Last value, mean and least-squares slope of one feature's observed trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub last: f64,
    pub mean: f64,
    pub slope: f64,
}

impl TrajectorySummary {
    pub fn from_points(months: &[f64], values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mt = months.iter().sum::<f64>() / n;
        let sxx: f64 = months.iter().map(|m| (m - mt).powi(2)).sum();
        let sxy: f64 = months.iter().zip(values).map(|(m, v)| (m - mt) * (v - mean)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        Self { last: *values.last().expect("nonempty"), mean, slope }
    }

    /// Summaries of every feature over observed entries.
    pub fn of_sequence(seq: &PatientSequence) -> Vec<Self> {
        let d = seq.values.first().map_or(0, Vec::len);
        (0..d)
            .map(|j| {
                let (m, v): (Vec<f64>, Vec<f64>) = seq
                    .months
                    .iter()
                    .zip(seq.values.iter().zip(&seq.mask))
                    .filter(|(_, (_, mask))| mask[j])
                    .map(|(&m, (row, _))| (m as f64, row[j]))
                    .unzip();
                Self::from_points(&m, &v)
            })
            .collect()
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CoreError::Config("n must be at least 1".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(CoreError::Config("horizon must be positive".into()));
        }
        if !(self.censoring_rate >= 0.0) {
            return Err(CoreError::Config("censoring rate must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.sex_prob) {
            return Err(CoreError::Config("sex_prob must lie in [0, 1]".into()));
        }
        self.h01.validate("h01", self.d)?;
        self.h02.validate("h02", self.d)?;
        self.h12.validate("h12", self.d)?;
        let l = &self.longitudinal;
        if l.min_len == 0 || l.min_len > l.max_len {
            return Err(CoreError::Config("need 1 <= min_len <= max_len".into()));
        }
        if !(l.obs_prob > 0.0 && l.obs_prob <= 1.0) {
            return Err(CoreError::Config("obs_prob must lie in (0, 1]".into()));
        }
        if !l.drift.is_empty() && l.drift.len() != self.d {
            return Err(CoreError::Config(format!("drift needs {} entries", self.d)));
        }
        if l.step_std < 0.0 || l.drift_std < 0.0 || l.init_std < 0.0 {
            return Err(CoreError::Config("standard deviations must be nonnegative".into()));
        }
        Ok(())
    }

    /// Constant cause-specific hazards with no covariate effects and no censoring.
    pub fn constant_hazards(rate01: f64, rate02: f64, n: usize, seed: u64) -> Self {
        Self {
            n,
            d: 1,
            h01: WeibullHazard::exponential(rate01),
            h02: WeibullHazard::exponential(rate02),
            h12: WeibullHazard::exponential(rate02),
            longitudinal: Longitudinal::default(),
            censoring_rate: 0.0,
            horizon: f64::INFINITY,
            grid_size: Some(36),
            sex_prob: 0.5,
            seed,
        }
    }

    /// Benchmark cohort: hospitalization driven by the slope of feature 3,
    /// death by age, about 20% and 19% observed first-event rates.
    pub fn benchmark(n: usize, seed: u64) -> Self {
        let d = 10;
        let mut slope = vec![0.0; d];
        slope[3] = 14.0;
        Self {
            n,
            d,
            h01: WeibullHazard {
                shape: 1.2,
                scale: 90.0,
                beta: vec![0.0, 0.0],
                gamma: TrajectoryEffects { slope, ..TrajectoryEffects::default() },
            },
            h02: WeibullHazard { shape: 1.1, scale: 112.0, beta: vec![1.0, 0.3], gamma: TrajectoryEffects::default() },
            h12: WeibullHazard { shape: 1.0, scale: 20.0, beta: vec![0.7, 0.0], gamma: TrajectoryEffects::default() },
            longitudinal: Longitudinal {
                step_std: 0.15,
                drift: Vec::new(),
                drift_std: 0.1,
                init_std: 2.0,
                min_len: 6,
                max_len: 24,
                obs_prob: 0.95,
            },
            censoring_rate: 0.03,
            horizon: 36.0,
            grid_size: Some(36),
            sex_prob: 0.5,
            seed,
        }
    }

    fn grid(&self) -> Result<TimeGrid> {
        let k = self.grid_size.unwrap_or_else(|| self.horizon.ceil().clamp(1.0, 120.0) as usize);
        let end = if self.horizon.is_finite() { self.horizon } else { k as f64 };
        TimeGrid::uniform(end, k)
    }
}

fn simulate_subject(cfg: &SimConfig, i: usize) -> PatientSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    let l = &cfg.longitudinal;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let age = normal(&mut rng);
    let sex = if rng.random::<f64>() < cfg.sex_prob { 1.0 } else { 0.0 };
    let statics = vec![age, sex];

    let len = rng.random_range(l.min_len..=l.max_len);
    let mut level: Vec<f64> = (0..cfg.d).map(|_| l.init_std * normal(&mut rng)).collect();
    let drift: Vec<f64> =
        (0..cfg.d).map(|j| l.drift.get(j).copied().unwrap_or(0.0) + l.drift_std * normal(&mut rng)).collect();
    let (mut months, mut values, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for m in 0..len {
        if m > 0 {
            for j in 0..cfg.d {
                level[j] += drift[j] + l.step_std * normal(&mut rng);
            }
        }
        let obs: Vec<bool> = (0..cfg.d).map(|_| rng.random::<f64>() < l.obs_prob).collect();
        if obs.iter().any(|&o| o) {
            months.push(m as u32);
            values.push(level.iter().zip(&obs).map(|(&v, &o)| if o { v } else { 0.0 }).collect());
            mask.push(obs);
        }
    }
    let mut seq = PatientSequence {
        id: format!("s{i:06}"),
        months,
        values,
        mask,
        statics,
        outcome: Outcome { cause: 0, time: 1.0, second: None },
    };
    let summary = TrajectorySummary::of_sequence(&seq);
    let eta01 = cfg.h01.linear_predictor(&seq.statics, &summary);
    let eta02 = cfg.h02.linear_predictor(&seq.statics, &summary);
    let eta12 = cfg.h12.linear_predictor(&seq.statics, &summary);
    let t01 = cfg.h01.sample(eta01, &mut rng);
    let t02 = cfg.h02.sample(eta02, &mut rng);
    let t12 = cfg.h12.sample(eta12, &mut rng);
    let c = if cfg.censoring_rate > 0.0 {
        let e: f64 = Exp1.sample(&mut rng);
        e / cfg.censoring_rate
    } else {
        f64::INFINITY
    };
    let c = c.min(cfg.horizon);
    let first = t01.min(t02);
    seq.outcome = if first > c {
        Outcome { cause: 0, time: c, second: None }
    } else if t01 <= t02 {
        let second = if t01 + t12 <= c {
            SecondEvent { time: t12, cause: 2 }
        } else {
            SecondEvent { time: c - t01, cause: 0 }
        };
        Outcome { cause: 1, time: t01, second: Some(second) }
    } else {
        Outcome { cause: 2, time: t02, second: None }
    };
    seq
}

/// Draws a cohort; each subject uses its own random stream so the result
/// does not depend on thread count.
pub fn simulate_cohort(cfg: &SimConfig) -> Result<Cohort> {
    cfg.validate()?;
    let sequences: Vec<PatientSequence> = (0..cfg.n).into_par_iter().map(|i| simulate_subject(cfg, i)).collect();
    Ok(Cohort {
        sequences,
        features: (0..cfg.d).map(|j| FeatureMeta::continuous(format!("x{j}"))).collect(),
        static_features: STATIC_NAMES.iter().map(|n| FeatureMeta::continuous(*n)).collect(),
        grid: cfg.grid()?,
        risk_mode: RiskMode::SemiCompeting,
    })
}

/// True first-event incidence of `cause` (1 or 2) by time `t` for fixed covariates, ignoring censoring.
pub fn analytic_cif(cfg: &SimConfig, cause: u8, statics: &[f64], summary: &[TrajectorySummary], t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let e1 = cfg.h01.linear_predictor(statics, summary);
    let e2 = cfg.h02.linear_predictor(statics, summary);
    let (own, eo) = if cause == 1 { (&cfg.h01, e1) } else { (&cfg.h02, e2) };
    if cfg.h01.shape == 1.0 && cfg.h02.shape == 1.0 {
        let r1 = e1.exp() / cfg.h01.scale;
        let r2 = e2.exp() / cfg.h02.scale;
        let r = if cause == 1 { r1 } else { r2 };
        return r / (r1 + r2) * (1.0 - (-(r1 + r2) * t).exp());
    }
    let integrand = |u: f64| -> f64 {
        let s = (-cfg.h01.cumulative(u, e1) - cfg.h02.cumulative(u, e2)).exp();
        own.hazard(u, eo) * s
    };
    // geometric panels t·2^{-j}; on the innermost one u = b v^q removes the u^{k-1} singularity
    let panels = 48;
    let mut acc = 0.0;
    let b0 = t * 0.5f64.powi(panels);
    let q = (2.0 / own.shape).max(1.0);
    acc += simpson(|v| if v <= 0.0 { 0.0 } else { integrand(b0 * v.powf(q)) * b0 * q * v.powf(q - 1.0) }, 0.0, 1.0, 200);
    let mut lo = b0;
    for _ in 0..panels {
        let hi = lo * 2.0;
        acc += simpson(integrand, lo, hi, 64);
        lo = hi;
    }
    acc.clamp(0.0, 1.0)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let h = (b - a) / m as f64;
    let mut acc = f(a) + f(b);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}
