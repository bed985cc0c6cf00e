//! Finite-difference spot checks of model losses on shrunken configurations.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survbench_autodiff::{Graph, ParamStore, Tensor, Var};
use survbench_core::cohort::{apply_inclusion, to_transition_records, Preprocessor};
use survbench_core::deep::ddh::{DDHConfig, DynamicDeepHit};
use survbench_core::deep::drsm::{DRSMConfig, Distribution, Drsm};
use survbench_core::deep::pseudo::{pseudo_values, DeepPseudo, PseudoConfig};
use survbench_core::deep::survtrace::{SurvTrace, SurvTraceConfig};
use survbench_core::design::ModelData;
use survbench_core::estimators::censoring_survival;
use survbench_core::simulate::{simulate_cohort, SimConfig};

/// Parameter entries checked per model.
pub const SPOT_CHECKS: usize = 50;
const H: f64 = 1e-5;

/// Small preprocessed data set with two features on a six-point grid.
pub fn small_data(n: usize, seed: u64) -> ModelData {
    let mut cfg = SimConfig::benchmark(n, seed);
    cfg.d = 2;
    cfg.h01.gamma.slope = vec![0.0, 8.0];
    cfg.grid_size = Some(6);
    cfg.longitudinal.obs_prob = 0.7;
    cfg.longitudinal.max_len = 8;
    let cohort = apply_inclusion(&simulate_cohort(&cfg).unwrap(), 2, 8);
    let ids: HashSet<String> = cohort.ids().map(str::to_string).collect();
    let prepared = Preprocessor::fit(&cohort, &ids).unwrap().apply(&cohort);
    ModelData::new(&prepared, &to_transition_records(&prepared))
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-6)` over `SPOT_CHECKS`
/// random parameter entries.
pub fn spot_check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M, &mut Graph) -> Var,
    seed: u64,
) -> f64 {
    let value = |m: &M| {
        let mut g = Graph::eval();
        let l = loss(m, &mut g);
        g.value(l).item()
    };
    let mut g = Graph::eval();
    let l = loss(model, &mut g);
    g.backward(l).unwrap();
    let grads = g.param_grads(store(model)).unwrap();
    let ids: Vec<_> = store(model).ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..SPOT_CHECKS {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..store(model).get(id).len());
        let orig = store(model).get(id).data()[k];
        store(model).get_mut(id).data_mut()[k] = orig + H;
        let up = value(model);
        store(model).get_mut(id).data_mut()[k] = orig - H;
        let down = value(model);
        store(model).get_mut(id).data_mut()[k] = orig;
        let n = (up - down) / (2.0 * H);
        let a = grads.get(id).data()[k];
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
    }
    worst
}

pub fn ddh_error(data: &ModelData, idx: &[usize]) -> f64 {
    let cfg = DDHConfig { rnn_hidden: 3, attention_hidden: 3, cs_hidden: 3, dropout: 0.0, ..DDHConfig::default() };
    let mut m = DynamicDeepHit::new(&cfg, data.n_step(), data.layout.n_encoded(), data.grid.clone()).unwrap();
    spot_check(&mut m, |m| &mut m.store, |m, g| m.loss(g, data, idx).unwrap(), 1)
}

pub fn drsm_error(data: &ModelData, idx: &[usize], distribution: Distribution) -> f64 {
    let cfg = DRSMConfig { mixtures: 2, rnn_hidden: 3, distribution, dropout: 0.0, ..DRSMConfig::default() };
    let mut m = Drsm::new(&cfg, data.n_step(), data.grid.clone(), 10.0).unwrap();
    spot_check(&mut m, |m| &mut m.store, |m, g| m.loss(g, data, idx).unwrap(), 2)
}

pub fn survtrace_error(data: &ModelData, idx: &[usize]) -> f64 {
    let cfg = SurvTraceConfig { embedding: 4, intermediate: 4, heads: 2, dropout: 0.0, ..SurvTraceConfig::default() };
    let g = censoring_survival(&data.times_of(idx), &data.causes_of(idx)).unwrap();
    let n_numeric = data.numeric[0].len();
    let mut m = SurvTrace::new(&cfg, n_numeric, &data.vocab_sizes, data.grid.clone(), g).unwrap();
    spot_check(&mut m, |m| &mut m.store, |m, g| m.loss(g, data, idx).unwrap(), 3)
}

pub fn pseudo_error(data: &ModelData, idx: &[usize]) -> f64 {
    let cfg = PseudoConfig { hidden: vec![3], dropout: 0.0, ..PseudoConfig::default() };
    let pv = pseudo_values(data, idx).unwrap();
    let rows: Vec<Vec<f64>> = (0..idx.len()).map(|r| pv.subject_row(r)).collect();
    let targets = Tensor::from_rows(&rows).unwrap();
    let mut m = DeepPseudo::new(&cfg, data.n_snapshot(), data.grid.clone()).unwrap();
    spot_check(&mut m, |m| &mut m.store, |m, g| m.loss(g, data, idx, &targets).unwrap(), 4)
}
