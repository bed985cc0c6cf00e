//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survbench_core::cohort::{load_cohort, load_schema, Cohort, RiskMode};
use survbench_core::eval::Concordance;
use survbench_core::models::ModelSpec;
use survbench_core::simulate::{simulate_cohort, SimConfig};
use survbench_core::{CoreError, TimeGrid};

use crate::error::{CliError, Result};

/// Where the cohort comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CohortSource {
    /// The seeded benchmark generator.
    Benchmark { n: usize, seed: u64 },
    /// A fully specified simulation.
    Simulate(Box<SimConfig>),
    /// A JSONL cohort with its feature schema.
    File { path: PathBuf, schema: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskModes {
    SemiCompeting,
    Competing,
    Both,
}

impl RiskModes {
    pub fn modes(self) -> Vec<RiskMode> {
        match self {
            Self::SemiCompeting => vec![RiskMode::SemiCompeting],
            Self::Competing => vec![RiskMode::Competing],
            Self::Both => vec![RiskMode::SemiCompeting, RiskMode::Competing],
        }
    }
}

/// Uniform evaluation grid `horizon/points, …, horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub horizon: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cohort: CohortSource,
    pub risk_mode: RiskModes,
    pub models: Vec<ModelSpec>,
    pub k: usize,
    pub seed: u64,
    pub concordance: Concordance,
    pub min_records: usize,
    pub max_len: usize,
    /// Static covariate whose levels split the incidence curves.
    pub strata: Option<String>,
    pub grid: Option<GridSpec>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: CohortSource::Benchmark { n: 1000, seed: 42 },
            risk_mode: RiskModes::SemiCompeting,
            models: vec![ModelSpec::from_key("cs-cox").expect("known model")],
            k: 10,
            seed: 0,
            concordance: Concordance::Ipcw,
            min_records: 4,
            max_len: 24,
            strata: Some("sex".into()),
            grid: None,
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(CliError::Config("at least one model is required".into()));
        }
        if self.k < 2 {
            return Err(CliError::Config(format!("k must be at least 2, got {}", self.k)));
        }
        for m in &self.models {
            m.validate().map_err(|e| CliError::stage("config", e))?;
        }
        Ok(())
    }

    /// Loads or simulates the cohort with the first risk mode.
    pub fn cohort(&self) -> Result<Cohort> {
        let mut cohort = match &self.cohort {
            CohortSource::Benchmark { n, seed } => simulate_cohort(&SimConfig::benchmark(*n, *seed)),
            CohortSource::Simulate(cfg) => simulate_cohort(cfg),
            CohortSource::File { path, schema } => {
                load_schema(schema).and_then(|s| load_cohort(path, &s))
            }
        }
        .map_err(|e| CliError::stage("cohort", e))?;
        if let Some(g) = self.grid {
            cohort.grid = TimeGrid::uniform(g.horizon, g.points).map_err(|e| CliError::stage("grid", e))?;
        }
        cohort.risk_mode = self.risk_mode.modes()[0];
        Ok(cohort)
    }
}

/// Reads a JSON file into `T`, reporting problems as configuration errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn model_list(keys: &str) -> Result<Vec<ModelSpec>> {
    keys.split(',')
        .filter(|k| !k.trim().is_empty())
        .map(|k| ModelSpec::from_key(k.trim()).map_err(|e: CoreError| CliError::stage("config", e)))
        .collect()
}
