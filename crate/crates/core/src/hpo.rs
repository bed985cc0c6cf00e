//! Hyperband with uniform random configuration sampling, plus plain random search.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Named dimensions, each a finite list of values. Dotted names address
/// nested configuration fields (`train.batch_size`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Vec<Value>>,
}

pub type Config = BTreeMap<String, Value>;

impl SearchSpace {
    pub fn new(dims: impl IntoIterator<Item = (String, Vec<Value>)>) -> Self {
        Self { dims: dims.into_iter().collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(CoreError::Config("search space has no dimensions".into()));
        }
        if let Some((name, _)) = self.dims.iter().find(|(_, v)| v.is_empty()) {
            return Err(CoreError::Config(format!("search dimension `{name}` has no values")));
        }
        Ok(())
    }

    /// Number of distinct configurations.
    pub fn size(&self) -> usize {
        self.dims.values().map(Vec::len).product()
    }
}

/// Uniform independent draw of one value per dimension.
pub fn sample_config<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Result<Config> {
    space.validate()?;
    Ok(space.dims.iter().map(|(k, v)| (k.clone(), v[rng.random_range(0..v.len())].clone())).collect())
}

/// Hex SHA-256 of the canonical JSON of a configuration.
pub fn config_hash(config: &Config) -> String {
    let text = serde_json::to_string(config).expect("configs serialize");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `config` into a JSON object, following dotted paths.
pub fn apply_config(base: &Value, config: &Config) -> Result<Value> {
    let mut out = if base.is_null() { Value::Object(Default::default()) } else { base.clone() };
    for (path, v) in config {
        let mut node = &mut out;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CoreError::Config(format!("`{path}` does not address a configuration object")))?;
            if i + 1 == parts.len() {
                obj.insert((*part).to_string(), v.clone());
                break;
            }
            node = obj.entry(*part).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(out)
}

/// Rewrites search dimensions that do not map one-to-one onto configuration
/// fields: DeepPseudo's `shared_layers` × `shared_size` become `hidden`.
pub fn resolve_config(model: &str, config: &Config) -> Config {
    let mut out = config.clone();
    if model == "deep-pseudo" {
        let layers = out.remove("shared_layers");
        let size = out.remove("shared_size");
        if layers.is_some() || size.is_some() {
            let n = layers.and_then(|v| v.as_u64()).unwrap_or(2) as usize;
            let w = size.and_then(|v| v.as_u64()).unwrap_or(64);
            out.insert("hidden".into(), Value::from(vec![w; n]));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: Config,
    pub hash: String,
    /// Budget in epochs (rounded up for the objective).
    pub budget: f64,
    /// Validation loss; infinite for failed trials.
    pub loss: f64,
    pub status: TrialStatus,
    pub bracket: usize,
    pub rung: usize,
    /// Failure message of failed trials.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One Hyperband bracket: `n` starting configurations at budget `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub n: usize,
    pub r: f64,
}

/// Bracket schedule for maximum budget `r_max` and reduction factor `eta`,
/// from the most exploratory bracket to plain full-budget evaluation.
pub fn hyperband_brackets(r_max: f64, eta: usize) -> Result<Vec<Bracket>> {
    if !(r_max >= 1.0) || !r_max.is_finite() {
        return Err(CoreError::Config(format!("maximum budget must be >= 1, got {r_max}")));
    }
    if eta < 2 {
        return Err(CoreError::Config(format!("reduction factor must be >= 2, got {eta}")));
    }
    let eta_f = eta as f64;
    let mut s_max = 0usize;
    while eta_f.powi(s_max as i32 + 1) <= r_max * (1.0 + 1e-12) {
        s_max += 1;
    }
    Ok((0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max + 1) as f64 / (s + 1) as f64 * eta_f.powi(s as i32) - 1e-9).ceil() as usize;
            Bracket { s, n, r: r_max / eta_f.powi(s as i32) }
        })
        .collect())
}

/// Trials sorted ascending by `(loss, config hash)`.
pub fn ranked(trials: &[Trial]) -> Vec<Trial> {
    let mut v = trials.to_vec();
    v.sort_by(|a, b| a.loss.total_cmp(&b.loss).then_with(|| a.hash.cmp(&b.hash)).then(a.budget.total_cmp(&b.budget)));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
    pub brackets: Vec<Bracket>,
}

impl SearchResult {
    /// The `n` best trials by `(loss, hash)`.
    pub fn top(&self, n: usize) -> Vec<Trial> {
        ranked(&self.trials).into_iter().take(n).collect()
    }
}

fn evaluate<F>(configs: &[Config], budget: f64, bracket: usize, rung: usize, objective: &F) -> Vec<Trial>
where
    F: Fn(&Config, f64) -> Result<f64> + Sync,
{
    configs
        .par_iter()
        .map(|c| {
            let (loss, status, error) = match objective(c, budget) {
                Ok(l) if l.is_finite() => (l, TrialStatus::Ok, None),
                Ok(l) => (f64::INFINITY, TrialStatus::Failed, Some(format!("non-finite loss {l}"))),
                Err(e) => (f64::INFINITY, TrialStatus::Failed, Some(e.to_string())),
            };
            if let Some(e) = &error {
                log::warn!("trial {} failed: {e}", config_hash(c));
            }
            Trial { config: c.clone(), hash: config_hash(c), budget, loss, status, bracket, rung, error }
        })
        .collect()
}

fn best_of(trials: &[Trial]) -> Result<Trial> {
    ranked(trials)
        .into_iter()
        .find(|t| t.status == TrialStatus::Ok)
        .ok_or_else(|| CoreError::Numeric("every trial failed".into()))
}

/// Hyperband search. `objective(config, budget)` returns a validation loss;
/// every rung restarts training from scratch at its budget. Each rung keeps
/// the best `⌈n/η⌉` configurations.
pub fn hyperband<F>(space: &SearchSpace, r_max: f64, eta: usize, seed: u64, objective: F) -> Result<SearchResult>
where
    F: Fn(&Config, f64) -> Result<f64> + Sync,
{
    space.validate()?;
    let brackets = hyperband_brackets(r_max, eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::new();
    for b in &brackets {
        let mut configs =
            (0..b.n).map(|_| sample_config(space, &mut rng)).collect::<Result<Vec<_>>>()?;
        for rung in 0..=b.s {
            let budget = b.r * (eta as f64).powi(rung as i32);
            let results = evaluate(&configs, budget, b.s, rung, &objective);
            trials.extend(results.iter().cloned());
            if rung == b.s {
                break;
            }
            let keep = configs.len().div_ceil(eta).max(1);
            configs = ranked(&results).into_iter().take(keep).map(|t| t.config).collect();
        }
    }
    Ok(SearchResult { best: best_of(&trials)?, trials, brackets })
}

/// Random search with `n_trials` independent draws, each scored once.
pub fn random_search<F>(space: &SearchSpace, n_trials: usize, seed: u64, objective: F) -> Result<SearchResult>
where
    F: Fn(&Config) -> Result<f64> + Sync,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(CoreError::Config("random search needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs = (0..n_trials).map(|_| sample_config(space, &mut rng)).collect::<Result<Vec<_>>>()?;
    let trials = evaluate(&configs, 0.0, 0, 0, &|c: &Config, _| objective(c));
    Ok(SearchResult { best: best_of(&trials)?, trials, brackets: Vec::new() })
}

fn values<T: Serialize>(xs: &[T]) -> Vec<Value> {
    xs.iter().map(|x| serde_json::to_value(x).expect("plain values")).collect()
}

/// Default search space of a model, keyed by its command-line name.
pub fn default_space(model: &str) -> Result<SearchSpace> {
    let dims: Vec<(&str, Vec<Value>)> = match model {
        "survival-boost" => vec![
            ("learning_rate", values(&[0.01, 0.05, 0.1])),
            ("max_leaf_nodes", values(&[10, 20, 30, 40, 50])),
            ("min_samples_leaf", values(&[10, 30, 50, 70, 90, 110])),
            ("n_iterations", values(&[75, 100, 150, 200])),
        ],
        "deep-pseudo" => vec![
            ("shared_layers", values(&[1, 2, 3, 4, 5])),
            ("shared_size", values(&[50, 100, 200, 300])),
            ("dropout", values(&[0.0, 0.1, 0.3, 0.6])),
            ("train.batch_size", values(&[64, 128, 256])),
        ],
        "survtrace" => vec![
            ("layers", values(&[1, 2, 3])),
            ("embedding", values(&[12, 24, 48, 96])),
            ("intermediate", values(&[16, 32, 64])),
            ("heads", values(&[3, 6, 12])),
        ],
        "dynamic-deephit" => vec![
            ("rnn_layers", values(&[1, 2, 3, 4])),
            ("rnn_kind", values(&["GRU", "LSTM"])),
            ("rnn_hidden", values(&[100, 200, 300, 350])),
            ("attention_hidden", values(&[100, 200, 300, 350])),
            ("cs_layers", values(&[1, 2, 3, 4])),
            ("cs_hidden", values(&[100, 200, 300, 350])),
            ("dropout", values(&[0.1, 0.3, 0.6])),
            ("alpha", values(&[0.1, 1.0, 3.0, 5.0])),
            ("beta", values(&[0.1, 1.0, 3.0, 5.0])),
            ("sigma", values(&[0.1, 1.0, 3.0, 5.0])),
        ],
        "drsm" => vec![
            ("mixtures", values(&[3, 4, 5, 6])),
            ("distribution", values(&["weibull", "log-normal"])),
            ("rnn_kind", values(&["GRU", "LSTM"])),
            ("rnn_layers", values(&[1, 2, 3, 4])),
            ("rnn_hidden", values(&[200, 300, 350, 400])),
            ("dropout", values(&[0.0, 0.1, 0.3])),
        ],
        other => {
            return Err(CoreError::Config(format!("model `{other}` has no search space (statistical models are not tuned)")))
        }
    };
    Ok(SearchSpace::new(dims.into_iter().map(|(k, v)| (k.to_string(), v))))
}
