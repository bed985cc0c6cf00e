//! One entry point for fitting and predicting with any of the seven models.

use serde::{Deserialize, Serialize};

use crate::deep::ddh::{fit_dynamic_deephit, DDHConfig, DynamicDeepHit};
use crate::deep::drsm::{fit_drsm, DRSMConfig, Drsm};
use crate::deep::pseudo::{fit_deep_pseudo, pseudo_values, DeepPseudo, PseudoConfig};
use crate::deep::survtrace::{fit_survtrace, SurvTrace, SurvTraceConfig};
use crate::deep::{split_by_patient, ModelCheckpoint};
use crate::design::{ModelData, N_CAUSES};
use crate::error::{CoreError, Result};
use crate::gbm::{fit_survival_boost, ipcw_log_loss, predict_cif_sb, SBConfig, SBModel};
use crate::grid::CifCurve;
use crate::linear::{fit_cs_cox, fit_fine_gray, predict_cif_cox, predict_cif_fine_gray, CoxModel, FineGrayModel, FitConfig};
use crate::estimators::censoring_survival;

/// A model family with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "config", rename_all = "kebab-case", try_from = "RawSpec")]
pub enum ModelSpec {
    CsCox(FitConfig),
    FineGray(FitConfig),
    SurvivalBoost(SBConfig),
    DeepPseudo(PseudoConfig),
    #[serde(rename = "survtrace")]
    SurvTrace(SurvTraceConfig),
    DynamicDeephit(DDHConfig),
    Drsm(DRSMConfig),
}

impl ModelSpec {
    /// Command-line identifiers, in report order.
    pub const KEYS: [&'static str; 7] =
        ["cs-cox", "fine-gray", "survival-boost", "deep-pseudo", "survtrace", "dynamic-deephit", "drsm"];

    /// Default configuration of the model named `key`.
    pub fn from_key(key: &str) -> Result<Self> {
        Ok(match key {
            "cs-cox" => Self::CsCox(FitConfig::default()),
            "fine-gray" => Self::FineGray(FitConfig::default()),
            "survival-boost" => Self::SurvivalBoost(SBConfig::default()),
            "deep-pseudo" => Self::DeepPseudo(PseudoConfig::default()),
            "survtrace" => Self::SurvTrace(SurvTraceConfig::default()),
            "dynamic-deephit" => Self::DynamicDeephit(DDHConfig::default()),
            "drsm" => Self::Drsm(DRSMConfig::default()),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown model `{other}`; expected one of {}",
                    Self::KEYS.join(", ")
                )))
            }
        })
    }

    pub fn key(&self) -> &'static str {
        match self {
            Self::CsCox(_) => "cs-cox",
            Self::FineGray(_) => "fine-gray",
            Self::SurvivalBoost(_) => "survival-boost",
            Self::DeepPseudo(_) => "deep-pseudo",
            Self::SurvTrace(_) => "survtrace",
            Self::DynamicDeephit(_) => "dynamic-deephit",
            Self::Drsm(_) => "drsm",
        }
    }

    /// Display name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            Self::CsCox(_) => "CS-Cox",
            Self::FineGray(_) => "Fine-Gray",
            Self::SurvivalBoost(_) => "SurvivalBoost",
            Self::DeepPseudo(_) => "DeepPseudo",
            Self::SurvTrace(_) => "SurvTRACE",
            Self::DynamicDeephit(_) => "Dynamic-DeepHit",
            Self::Drsm(_) => "DRSM",
        }
    }

    pub fn is_deep(&self) -> bool {
        matches!(self, Self::DeepPseudo(_) | Self::SurvTrace(_) | Self::DynamicDeephit(_) | Self::Drsm(_))
    }

    /// The configuration alone, as JSON.
    pub fn config_value(&self) -> serde_json::Value {
        let v = serde_json::to_value(self).expect("model specs serialize");
        v.get("config").cloned().unwrap_or(serde_json::Value::Null)
    }

    /// Same family with a replaced configuration.
    pub fn with_config_value(&self, config: serde_json::Value) -> Result<Self> {
        fn parse<T: serde::de::DeserializeOwned>(name: &str, v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| CoreError::Config(format!("invalid {name} configuration: {e}")))
        }
        let config = if config.is_null() { serde_json::json!({}) } else { config };
        let name = self.name();
        Ok(match self {
            Self::CsCox(_) => Self::CsCox(parse(name, config)?),
            Self::FineGray(_) => Self::FineGray(parse(name, config)?),
            Self::SurvivalBoost(_) => Self::SurvivalBoost(parse(name, config)?),
            Self::DeepPseudo(_) => Self::DeepPseudo(parse(name, config)?),
            Self::SurvTrace(_) => Self::SurvTrace(parse(name, config)?),
            Self::DynamicDeephit(_) => Self::DynamicDeephit(parse(name, config)?),
            Self::Drsm(_) => Self::Drsm(parse(name, config)?),
        })
    }

    /// Sets the random seed of stochastic models.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            Self::CsCox(_) | Self::FineGray(_) => {}
            Self::SurvivalBoost(c) => c.seed = seed,
            Self::DeepPseudo(c) => c.train.seed = seed,
            Self::SurvTrace(c) => c.train.seed = seed,
            Self::DynamicDeephit(c) => c.train.seed = seed,
            Self::Drsm(c) => c.train.seed = seed,
        }
        s
    }

    /// Caps training epochs of neural models (the Hyperband budget).
    pub fn with_max_epochs(&self, epochs: usize) -> Self {
        let mut s = self.clone();
        match &mut s {
            Self::DeepPseudo(c) => c.train.max_epochs = epochs,
            Self::SurvTrace(c) => c.train.max_epochs = epochs,
            Self::DynamicDeephit(c) => c.train.max_epochs = epochs,
            Self::Drsm(c) => c.train.max_epochs = epochs,
            _ => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::CsCox(_) | Self::FineGray(_) => Ok(()),
            Self::SurvivalBoost(c) => c.validate(),
            Self::DeepPseudo(c) => c.validate(),
            Self::SurvTrace(c) => c.validate(),
            Self::DynamicDeephit(c) => c.validate(),
            Self::Drsm(c) => c.validate(),
        }
    }

    /// Fits on records `idx` of `data`.
    pub fn fit(&self, data: &ModelData, idx: &[usize]) -> Result<FittedModel> {
        self.validate()?;
        if idx.is_empty() {
            return Err(CoreError::Data("no training records".into()));
        }
        let names = data.layout.snapshot_names();
        let kind = match self {
            Self::CsCox(cfg) => ModelKind::CsCox(fit_linear(data, idx, |x, t, c, target| {
                fit_cs_cox(x, t, c, target, Some(&names), cfg)
            })?),
            Self::FineGray(cfg) => ModelKind::FineGray(fit_linear(data, idx, |x, t, c, target| {
                fit_fine_gray(x, t, c, target, Some(&names), cfg)
            })?),
            Self::SurvivalBoost(cfg) => {
                let x: Vec<Vec<f64>> = idx.iter().map(|&i| data.snapshot[i].clone()).collect();
                ModelKind::SurvivalBoost(fit_survival_boost(&x, &data.times_of(idx), &data.causes_of(idx), cfg)?)
            }
            Self::DeepPseudo(cfg) => {
                let pv = pseudo_values(data, idx)?;
                let (m, h) = fit_deep_pseudo(data, idx, &pv, cfg)?;
                return Ok(FittedModel { kind: ModelKind::DeepPseudo(m), val_loss: Some(h.best_val_loss) });
            }
            Self::SurvTrace(cfg) => {
                let (m, h) = fit_survtrace(data, idx, cfg)?;
                return Ok(FittedModel { kind: ModelKind::SurvTrace(m), val_loss: Some(h.best_val_loss) });
            }
            Self::DynamicDeephit(cfg) => {
                let (m, h) = fit_dynamic_deephit(data, idx, cfg)?;
                return Ok(FittedModel { kind: ModelKind::DynamicDeepHit(m), val_loss: Some(h.best_val_loss) });
            }
            Self::Drsm(cfg) => {
                let (m, h) = fit_drsm(data, idx, cfg)?;
                return Ok(FittedModel { kind: ModelKind::Drsm(m), val_loss: Some(h.best_val_loss) });
            }
        };
        Ok(FittedModel { kind, val_loss: None })
    }

    /// Validation loss for hyperparameter search: fits on a patient-level
    /// training part of `idx` and scores the held-out part. Neural models
    /// report their early-stopping validation loss; the others the IPCW
    /// log loss of their incidence predictions.
    pub fn validation_loss(&self, data: &ModelData, idx: &[usize], val_fraction: f64, seed: u64) -> Result<f64> {
        if self.is_deep() {
            let fitted = self.fit(data, idx)?;
            return fitted.val_loss.ok_or_else(|| CoreError::Numeric("missing validation loss".into()));
        }
        let (train, val) = split_by_patient(data, idx, val_fraction, seed)?;
        let fitted = self.fit(data, &train)?;
        let pred = fitted.predict(data, &val)?;
        let g = censoring_survival(&data.times_of(&train), &data.causes_of(&train))?;
        ipcw_log_loss(&pred, &data.times_of(&val), &data.causes_of(&val), &data.grid, &g, 20.0)
    }
}

/// Wire form of a [`ModelSpec`]; the configuration may be partial or absent.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    model: String,
    #[serde(default)]
    config: serde_json::Value,
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = CoreError;

    fn try_from(raw: RawSpec) -> Result<Self> {
        ModelSpec::from_key(&raw.model)?.with_config_value(raw.config)
    }
}

fn fit_linear<M>(
    data: &ModelData,
    idx: &[usize],
    fit: impl Fn(&[Vec<f64>], &[f64], &[u8], u8) -> Result<M>,
) -> Result<Vec<M>> {
    (1..=N_CAUSES)
        .map(|c| {
            let rows = data.eligible(c, idx);
            let x: Vec<Vec<f64>> = rows.iter().map(|&i| data.snapshot[i].clone()).collect();
            fit(&x, &data.times_of(&rows), &data.causes_of(&rows), c as u8)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    CsCox(Vec<CoxModel>),
    FineGray(Vec<FineGrayModel>),
    SurvivalBoost(SBModel),
    DeepPseudo(DeepPseudo),
    SurvTrace(SurvTrace),
    DynamicDeepHit(DynamicDeepHit),
    Drsm(Drsm),
}

/// A trained model of any family.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub kind: ModelKind,
    /// Best early-stopping validation loss of neural models.
    pub val_loss: Option<f64>,
}

/// Serialized form of a [`FittedModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "kebab-case")]
enum Saved {
    CsCox(Vec<CoxModel>),
    FineGray(Vec<FineGrayModel>),
    SurvivalBoost(Box<SBModel>),
    Neural(ModelCheckpoint),
}

impl FittedModel {
    /// Incidence curves on the data grid for records `idx`.
    pub fn predict(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<CifCurve>> {
        let x = |i: usize| &data.snapshot[i];
        match &self.kind {
            ModelKind::CsCox(m) => Ok(idx.iter().map(|&i| predict_cif_cox(m, x(i), &data.grid)).collect()),
            ModelKind::FineGray(m) => Ok(idx.iter().map(|&i| predict_cif_fine_gray(m, x(i), &data.grid)).collect()),
            ModelKind::SurvivalBoost(m) => Ok(idx
                .iter()
                .map(|&i| predict_cif_sb(m, x(i), &m.train_grid).resample(&m.train_grid, &data.grid))
                .collect()),
            ModelKind::DeepPseudo(m) => resampled(m.predict(data, idx)?, &m.grid, data),
            ModelKind::SurvTrace(m) => resampled(m.predict(data, idx)?, &m.grid, data),
            ModelKind::DynamicDeepHit(m) => resampled(m.predict(data, idx)?, &m.grid, data),
            ModelKind::Drsm(m) => resampled(m.predict(data, idx)?, &m.grid, data),
        }
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            ModelKind::CsCox(_) => "CS-Cox",
            ModelKind::FineGray(_) => "Fine-Gray",
            ModelKind::SurvivalBoost(_) => "SurvivalBoost",
            ModelKind::DeepPseudo(_) => "DeepPseudo",
            ModelKind::SurvTrace(_) => "SurvTRACE",
            ModelKind::DynamicDeepHit(_) => "Dynamic-DeepHit",
            ModelKind::Drsm(_) => "DRSM",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let saved = match &self.kind {
            ModelKind::CsCox(m) => Saved::CsCox(m.clone()),
            ModelKind::FineGray(m) => Saved::FineGray(m.clone()),
            ModelKind::SurvivalBoost(m) => Saved::SurvivalBoost(Box::new(m.clone())),
            ModelKind::DeepPseudo(m) => Saved::Neural(m.to_checkpoint()?),
            ModelKind::SurvTrace(m) => Saved::Neural(m.to_checkpoint()?),
            ModelKind::DynamicDeepHit(m) => Saved::Neural(m.to_checkpoint()?),
            ModelKind::Drsm(m) => Saved::Neural(m.to_checkpoint()?),
        };
        serde_json::to_string(&saved).map_err(|e| CoreError::Data(format!("model encoding failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let saved: Saved =
            serde_json::from_str(text).map_err(|e| CoreError::Data(format!("malformed model file: {e}")))?;
        let kind = match saved {
            Saved::CsCox(m) => ModelKind::CsCox(m),
            Saved::FineGray(m) => ModelKind::FineGray(m),
            Saved::SurvivalBoost(m) => ModelKind::SurvivalBoost(*m),
            Saved::Neural(ckpt) => match ckpt.kind.as_str() {
                crate::deep::pseudo::KIND => ModelKind::DeepPseudo(DeepPseudo::from_checkpoint(&ckpt)?),
                crate::deep::survtrace::KIND => ModelKind::SurvTrace(SurvTrace::from_checkpoint(&ckpt)?),
                crate::deep::ddh::KIND => ModelKind::DynamicDeepHit(DynamicDeepHit::from_checkpoint(&ckpt)?),
                crate::deep::drsm::KIND => ModelKind::Drsm(Drsm::from_checkpoint(&ckpt)?),
                other => return Err(CoreError::Data(format!("unknown checkpoint kind `{other}`"))),
            },
        };
        Ok(Self { kind, val_loss: None })
    }
}

fn resampled(curves: Vec<CifCurve>, grid: &crate::grid::TimeGrid, data: &ModelData) -> Result<Vec<CifCurve>> {
    if grid == &data.grid {
        return Ok(curves);
    }
    Ok(curves.into_iter().map(|c| c.resample(grid, &data.grid)).collect())
}
