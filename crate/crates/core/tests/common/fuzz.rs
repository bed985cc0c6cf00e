//! Incidence-curve contract on randomly perturbed subjects.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use survbench_core::design::ModelData;
use survbench_core::models::ModelSpec;
use survbench_core::CifCurve;

pub const SUBJECTS: usize = 1000;

/// Small configurations that train in well under a second each.
pub fn shrunken_specs() -> Vec<ModelSpec> {
    let epochs = serde_json::json!({"max_epochs": 3, "batch_size": 64});
    [
        ("cs-cox", serde_json::json!({})),
        ("fine-gray", serde_json::json!({})),
        ("survival-boost", serde_json::json!({"n_iterations": 10})),
        ("deep-pseudo", serde_json::json!({"hidden": [8], "train": epochs})),
        ("survtrace", serde_json::json!({"embedding": 6, "intermediate": 8, "heads": 2, "train": epochs})),
        ("dynamic-deephit", serde_json::json!({"rnn_hidden": 6, "attention_hidden": 6, "cs_hidden": 6, "train": epochs})),
        ("drsm", serde_json::json!({"mixtures": 2, "rnn_hidden": 6, "train": epochs})),
    ]
    .into_iter()
    .map(|(k, c)| ModelSpec::from_key(k).unwrap().with_config_value(c).unwrap())
    .collect()
}

/// Adds heavy-tailed noise to every numeric input so predictions leave the training range.
pub fn perturb(data: &mut ModelData, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Normal<f64> = Normal::new(0.0, 3.0).unwrap();
    let mut jitter = |v: &mut f64| *v += noise.sample(&mut rng) * noise.sample(&mut rng).abs();
    data.snapshot.iter_mut().flatten().for_each(&mut jitter);
    data.numeric.iter_mut().flatten().for_each(&mut jitter);
    data.seq.iter_mut().flatten().flatten().for_each(&mut jitter);
}

/// First broken contract of a curve: range, per-cause monotonicity, total mass.
pub fn contract_violation(c: &CifCurve) -> Option<String> {
    for (cause, v) in c.values.iter().enumerate() {
        if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Some(format!("cause {} value {x} outside [0, 1]", cause + 1));
        }
        if v.windows(2).any(|w| w[1] < w[0]) {
            return Some(format!("cause {} decreases", cause + 1));
        }
    }
    let last: f64 = c.values.iter().map(|v| *v.last().unwrap()).sum();
    (last > 1.0 + 1e-9).then(|| format!("total incidence {last} at the last grid point"))
}
