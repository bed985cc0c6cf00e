use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use survbench_core::cohort::{apply_inclusion, save_cohort, to_transition_records, Cohort, Preprocessor, RiskMode};
use survbench_core::design::{ModelData, N_CAUSES};
use survbench_core::eval::{kfold_cv, CvConfig, MetricReport};
use survbench_core::explain::{attention_weighted_importance, explain_records, group_by_feature, SequenceExplainable};
use survbench_core::hpo::{
    apply_config, default_space, hyperband, random_search, resolve_config, Config, SearchResult, SearchSpace, Trial,
};
use survbench_core::linear::hazard_ratios;
use survbench_core::models::{FittedModel, ModelKind, ModelSpec};
use survbench_core::simulate::{simulate_cohort, SimConfig};
use survbench_core::{CoreError, TimeGrid};

use crate::config::{read_json, CohortSource, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::report::{self, panel_label};
use crate::CohortArgs;

/// Censoring weights are capped at this value in the IPCW log loss.
const IPCW_CAP: f64 = 20.0;

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| CliError::output(&cfg.output, e))?;
    Ok(&cfg.output)
}

fn apply_cohort_args(cfg: &mut ExperimentConfig, args: &CohortArgs) {
    if let Some(path) = &args.cohort {
        let schema = args.schema.clone().unwrap_or_else(|| sibling_schema(path));
        cfg.cohort = CohortSource::File { path: path.clone(), schema };
    }
}

fn sibling_schema(cohort: &Path) -> PathBuf {
    cohort.parent().unwrap_or(Path::new(".")).join("schema.json")
}

pub fn simulate(cfg: &ExperimentConfig, n: Option<usize>, seed: Option<u64>) -> Result<()> {
    let sim = match (&cfg.cohort, n) {
        (_, Some(n)) => SimConfig::benchmark(n, seed.unwrap_or(42)),
        (CohortSource::Benchmark { n, seed: s }, None) => SimConfig::benchmark(*n, seed.unwrap_or(*s)),
        (CohortSource::Simulate(c), None) => {
            let mut c = (**c).clone();
            if let Some(s) = seed {
                c.seed = s;
            }
            c
        }
        (CohortSource::File { .. }, None) => {
            return Err(CliError::Config("simulate needs --n or a simulated cohort source".into()))
        }
    };
    let cohort = simulate_cohort(&sim).map_err(|e| CliError::stage("simulation", e))?;
    let dir = out_dir(cfg)?;
    let path = dir.join("cohort.jsonl");
    save_cohort(&cohort, &path).map_err(|e| CliError::stage("writing cohort", e))?;
    report::write_json(&dir.join("schema.json"), &cohort.features)?;
    report::write_json(&dir.join("simulation.json"), &sim)?;
    println!("wrote {} patients to {}", cohort.len(), path.display());
    Ok(())
}

/// Everything needed to score new patients with a fitted model.
#[derive(Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub spec: ModelSpec,
    pub preprocessor: Preprocessor,
    pub min_records: usize,
    pub max_len: usize,
    pub grid: TimeGrid,
    pub risk_mode: RiskMode,
    pub model: Value,
}

/// Inclusion rules, preprocessing fitted on every patient, transition records.
fn prepare_all(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<(ModelData, Preprocessor)> {
    let cohort = apply_inclusion(cohort, cfg.min_records, cfg.max_len);
    let ids: HashSet<String> = cohort.ids().map(str::to_string).collect();
    let pre = Preprocessor::fit(&cohort, &ids).map_err(|e| CliError::stage("preprocessing", e))?;
    let prepared = pre.apply(&cohort);
    let records = to_transition_records(&prepared);
    let data = ModelData::new(&prepared, &records);
    if data.is_empty() {
        return Err(CliError::stage("preprocessing", CoreError::Data("no patients pass the inclusion rules".into())));
    }
    Ok((data, pre))
}

fn configured_spec(cfg: &ExperimentConfig, key: &str) -> Result<ModelSpec> {
    match cfg.models.iter().find(|m| m.key() == key) {
        Some(m) => Ok(m.clone()),
        None => ModelSpec::from_key(key).map_err(|e| CliError::stage("config", e)),
    }
}

pub fn fit(cfg: &mut ExperimentConfig, key: &str, args: &CohortArgs) -> Result<()> {
    apply_cohort_args(cfg, args);
    let spec = configured_spec(cfg, key)?.with_seed(cfg.seed);
    spec.validate().map_err(|e| CliError::stage("config", e))?;
    let cohort = cfg.cohort()?;
    let (data, pre) = prepare_all(cfg, &cohort)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let model = spec.fit(&data, &all).map_err(|e| CliError::stage(format!("fitting {}", spec.name()), e))?;
    let dir = out_dir(cfg)?;
    let encoded = model.to_json().map_err(|e| CliError::stage("saving model", e))?;
    let saved = SavedModel {
        spec: spec.clone(),
        preprocessor: pre,
        min_records: cfg.min_records,
        max_len: cfg.max_len,
        grid: data.grid.clone(),
        risk_mode: data.risk_mode,
        model: serde_json::from_str(&encoded).map_err(|e| CliError::output(&dir.join("model.json"), e))?,
    };
    report::write_json(&dir.join("model.json"), &saved)?;
    let linear: Option<Vec<(u8, Vec<String>, Vec<f64>, Vec<f64>)>> = match &model.kind {
        ModelKind::CsCox(ms) => Some(ms.iter().map(|m| (m.cause, m.names.clone(), m.beta.clone(), m.std_err.clone())).collect()),
        ModelKind::FineGray(ms) => {
            Some(ms.iter().map(|m| (m.cause, m.names.clone(), m.beta.clone(), m.std_err.clone())).collect())
        }
        _ => None,
    };
    if let Some(fits) = linear {
        let path = dir.join("hazard_ratios.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::output(&path, e))?;
        let err = |e: csv::Error| CliError::output(&path, e);
        w.write_record(["event", "covariate", "beta", "hazard_ratio", "ci_lower", "ci_upper"]).map_err(err)?;
        for (cause, names, beta, se) in fits {
            for hr in hazard_ratios(&names, &beta, &se) {
                w.write_record([
                    cause.to_string(),
                    hr.name,
                    format!("{:.6}", hr.beta),
                    format!("{:.6}", hr.hr),
                    format!("{:.6}", hr.lower),
                    format!("{:.6}", hr.upper),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| CliError::output(&path, e))?;
    }
    println!("fitted {} on {} records; saved to {}", spec.name(), data.len(), dir.join("model.json").display());
    Ok(())
}

#[derive(Serialize)]
struct ModelTiming {
    model: String,
    risk_mode: RiskMode,
    seconds: f64,
}

pub fn cv(cfg: &mut ExperimentConfig, args: &CohortArgs, threads: usize) -> Result<()> {
    apply_cohort_args(cfg, args);
    cfg.validate()?;
    let started = Instant::now();
    let base = cfg.cohort()?;
    let cv_cfg = CvConfig {
        k: cfg.k,
        seed: cfg.seed,
        concordance: cfg.concordance,
        min_records: cfg.min_records,
        max_len: cfg.max_len,
        parallel: true,
    };
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut timing = Vec::new();
    for mode in cfg.risk_mode.modes() {
        let cohort = Cohort { risk_mode: mode, ..base.clone() };
        for spec in &cfg.models {
            let t0 = Instant::now();
            log::info!("{} {}", panel_label(mode), spec.name());
            let r = kfold_cv(&cohort, spec, &cv_cfg)
                .map_err(|e| CliError::stage(format!("cross-validating {}", spec.name()), e))?;
            timing.push(ModelTiming { model: spec.name().into(), risk_mode: mode, seconds: t0.elapsed().as_secs_f64() });
            reports.push(r);
        }
    }
    let dir = out_dir(cfg)?;
    write_tables(dir, &reports)?;
    let included = apply_inclusion(&base, cfg.min_records, cfg.max_len);
    report::write_cif_curves(&dir.join("cif_curves.csv"), &included, cfg.strata.as_deref())?;
    report::write_json(&dir.join("reports.json"), &reports)?;
    let first_events: Vec<usize> =
        (0..=N_CAUSES as u8).map(|c| included.sequences.iter().filter(|s| s.outcome.cause == c).count()).collect();
    let manifest = json!({
        "tool": "survbench",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "threads": threads,
        "config": cfg,
        "cohort": {
            "patients": base.len(),
            "included": included.len(),
            "first_events": { "censored": first_events[0], "event1": first_events[1], "event2": first_events[2] },
        },
        "design": {
            "folds": cfg.k,
            "fold_assignment": "patient-level shuffle, position modulo k",
            "grid": { "points": base.grid.len(), "horizon": base.grid.last() },
            "concordance": cfg.concordance,
            "concordance_truncation": "last grid point",
            "risk_score": "incidence at the last grid point",
            "auc_weighting": "case weight 1/G(T-) per grid interval",
            "ipcw_cap": IPCW_CAP,
            "ties": "events precede censorings; tied scores count one half",
            "event1_records": "initial-state records only",
            "std": "population",
            "significance": "Wilcoxon signed-rank against the best model per column",
            "hyperband": { "R": 70, "eta": 3, "objective": "validation loss" },
        },
        "timing": { "total_seconds": started.elapsed().as_secs_f64(), "models": timing },
    });
    report::write_json(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {} reports to {}", reports.len(), dir.display());
    Ok(())
}

fn write_tables(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    let tests = report::comparisons(reports);
    report::write_metrics(&dir.join("metrics.csv"), reports, &tests)?;
    report::write_wilcoxon(&dir.join("wilcoxon.csv"), &tests)
}

pub fn report(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<()> {
    let dir = input.unwrap_or(&cfg.output);
    let reports: Vec<MetricReport> = read_json(&dir.join("reports.json"))?;
    write_tables(dir, &reports)?;
    println!("rebuilt tables in {}", dir.display());
    Ok(())
}

pub struct HpoOptions {
    pub model: String,
    pub space: Option<PathBuf>,
    pub r_max: f64,
    pub eta: usize,
    pub trials: usize,
    pub val_fraction: f64,
}

pub fn hpo(cfg: &mut ExperimentConfig, opts: &HpoOptions, args: &CohortArgs) -> Result<()> {
    apply_cohort_args(cfg, args);
    let spec = configured_spec(cfg, &opts.model)?;
    let space: SearchSpace = match &opts.space {
        Some(p) => read_json(p)?,
        None => default_space(spec.key()).map_err(|e| CliError::stage("config", e))?,
    };
    space.validate().map_err(|e| CliError::stage("config", e))?;
    if !(opts.val_fraction > 0.0 && opts.val_fraction < 1.0) {
        return Err(CliError::Config(format!("validation fraction must lie in (0, 1), got {}", opts.val_fraction)));
    }
    let cohort = cfg.cohort()?;
    let (data, _) = prepare_all(cfg, &cohort)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let base = spec.config_value();
    let seed = cfg.seed;
    let build = |c: &Config| -> survbench_core::Result<ModelSpec> {
        let value = apply_config(&base, &resolve_config(spec.key(), c))?;
        Ok(spec.with_config_value(value)?.with_seed(seed))
    };
    let result = if spec.is_deep() {
        hyperband(&space, opts.r_max, opts.eta, seed, |c, budget| {
            build(c)?.with_max_epochs(budget.ceil() as usize).validation_loss(&data, &all, opts.val_fraction, seed)
        })
    } else {
        if !matches!(spec, ModelSpec::SurvivalBoost(_)) {
            return Err(CliError::Config(format!("{} has no hyperparameters to tune", spec.name())));
        }
        random_search(&space, opts.trials, seed, |c| build(c)?.validation_loss(&data, &all, opts.val_fraction, seed))
    }
    .map_err(|e| CliError::stage(format!("tuning {}", spec.name()), e))?;
    let dir = out_dir(cfg)?;
    write_trials(&dir.join("hpo_trials.csv"), &result.trials, false)?;
    write_trials(&dir.join("hpo_top10.csv"), &result.top(10), true)?;
    report::write_json(&dir.join("hpo.json"), &HpoSummary { model: spec.key(), result: &result })?;
    println!("best loss {:.6} with {}", result.best.loss, config_text(&result.best.config));
    Ok(())
}

#[derive(Serialize)]
struct HpoSummary<'a> {
    model: &'a str,
    #[serde(flatten)]
    result: &'a SearchResult,
}

fn config_text(c: &Config) -> String {
    serde_json::to_string(c).unwrap_or_default()
}

fn write_trials(path: &Path, trials: &[Trial], ranked: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::output(path, e))?;
    let err = |e: csv::Error| CliError::output(path, e);
    let mut header = vec!["hash", "bracket", "rung", "budget", "loss", "status", "config", "error"];
    if ranked {
        header.insert(0, "rank");
    }
    w.write_record(&header).map_err(err)?;
    for (i, t) in trials.iter().enumerate() {
        let mut row = vec![
            t.hash.clone(),
            t.bracket.to_string(),
            t.rung.to_string(),
            format!("{}", t.budget),
            format!("{:.6}", t.loss),
            format!("{:?}", t.status).to_lowercase(),
            config_text(&t.config),
            t.error.clone().unwrap_or_default(),
        ];
        if ranked {
            row.insert(0, (i + 1).to_string());
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn explain(
    cfg: &ExperimentConfig,
    model_path: &Path,
    args: &CohortArgs,
    cause: usize,
    steps: usize,
    limit: Option<usize>,
) -> Result<()> {
    if !(1..=N_CAUSES).contains(&cause) {
        return Err(CliError::Config(format!("cause must be 1 or 2, got {cause}")));
    }
    if steps == 0 {
        return Err(CliError::Config("integration needs at least one step".into()));
    }
    let saved: SavedModel = read_json(model_path)?;
    let model = FittedModel::from_json(&saved.model.to_string()).map_err(|e| CliError::stage("loading model", e))?;
    let explainable: &dyn SequenceExplainable = match &model.kind {
        ModelKind::DynamicDeepHit(m) => m,
        ModelKind::Drsm(m) => m,
        _ => {
            return Err(CliError::Config(format!(
                "{} is not a sequence model; explanations need dynamic-deephit or drsm",
                model.name()
            )))
        }
    };
    let mut file_cfg = cfg.clone();
    apply_cohort_args(&mut file_cfg, args);
    file_cfg.grid = None;
    let raw = file_cfg.cohort()?;
    let included = apply_inclusion(&raw, saved.min_records, saved.max_len);
    let prepared = Cohort { grid: saved.grid.clone(), risk_mode: saved.risk_mode, ..saved.preprocessor.apply(&included) };
    let records = to_transition_records(&prepared);
    let data = ModelData::new(&prepared, &records);
    let mut idx = data.eligible(cause, &(0..data.len()).collect::<Vec<_>>());
    if let Some(n) = limit {
        idx.truncate(n);
    }
    if idx.is_empty() {
        return Err(CliError::stage("explain", CoreError::Data("no records to explain".into())));
    }
    let stage = |e| CliError::stage("explain", e);
    let attrs = explain_records(explainable, &data, &idx, cause, steps).map_err(stage)?;
    let attention = explainable.attention(&data, &idx).map_err(stage)?;
    let scores = attention_weighted_importance(&attrs, &attention).map_err(stage)?;
    let ranked = group_by_feature(&scores, &data.layout);
    let dir = out_dir(cfg)?;
    let path = dir.join("attributions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::output(&path, e))?;
    let err = |e: csv::Error| CliError::output(&path, e);
    w.write_record(["feature", "score"]).map_err(err)?;
    for (name, s) in &ranked {
        w.write_record([name.clone(), format!("{s:.6}")]).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::output(&path, e))?;
    let worst = attrs.iter().map(|a| a.residual.abs()).fold(0.0, f64::max);
    println!("explained {} records; largest completeness residual {worst:.3e}", idx.len());
    Ok(())
}
