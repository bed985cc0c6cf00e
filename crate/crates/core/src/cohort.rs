//! Longitudinal patient records: ingestion, preprocessing and transition expansion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
    BinaryCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    /// Most frequent category code on the fit split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
}

impl FeatureMeta {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Continuous, vocabulary: Vec::new(), mean: None, std: None, mode: None }
    }

    pub fn categorical(name: impl Into<String>, vocabulary: Vec<String>) -> Self {
        Self { vocabulary, kind: FeatureKind::Categorical, ..Self::continuous(name) }
    }

    pub fn binary_code(name: impl Into<String>) -> Self {
        Self { kind: FeatureKind::BinaryCode, ..Self::continuous(name) }
    }

    /// Value used for unobserved entries once preprocessing has run.
    pub fn fill_value(&self) -> f64 {
        match self.kind {
            FeatureKind::Continuous | FeatureKind::BinaryCode => 0.0,
            FeatureKind::Categorical => self.mode.unwrap_or(0) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub patient_id: String,
    pub month_index: u32,
    pub feature: String,
    pub value: RawValue,
}

/// One row per month with at least one record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonthlyMatrix {
    pub months: Vec<u32>,
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondEvent {
    pub time: f64,
    /// 2 for death after hospitalization, 0 if censored after it.
    #[serde(default = "default_second_cause")]
    pub cause: u8,
}

fn default_second_cause() -> u8 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// 0 censored, 1 hospitalization, 2 death.
    pub cause: u8,
    /// Months from the end of the input sequence.
    pub time: f64,
    pub second: Option<SecondEvent>,
}

impl Outcome {
    pub fn validate(&self) -> Result<()> {
        if self.cause > 2 {
            return Err(CoreError::Validation(format!("cause must be 0, 1 or 2, got {}", self.cause)));
        }
        if !(self.time.is_finite() && self.time > 0.0) {
            return Err(CoreError::Validation(format!("event time must be positive, got {}", self.time)));
        }
        if let Some(s) = &self.second {
            if self.cause != 1 {
                return Err(CoreError::Validation("a second event requires a first hospitalization".into()));
            }
            if !(s.time.is_finite() && s.time > 0.0) {
                return Err(CoreError::Validation(format!("second event time must be positive, got {}", s.time)));
            }
            if s.cause != 0 && s.cause != 2 {
                return Err(CoreError::Validation(format!("second event cause must be 0 or 2, got {}", s.cause)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSequence {
    pub id: String,
    pub months: Vec<u32>,
    /// `T × d`; unobserved entries hold the fill value (0 before preprocessing).
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    /// Demographics, in the cohort's static feature order.
    pub statics: Vec<f64>,
    pub outcome: Outcome,
}

impl PatientSequence {
    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    /// Months with at least one observed feature.
    pub fn observed_months(&self) -> usize {
        self.mask.iter().filter(|r| r.iter().any(|&m| m)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskMode {
    SemiCompeting,
    Competing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub sequences: Vec<PatientSequence>,
    pub features: Vec<FeatureMeta>,
    pub static_features: Vec<FeatureMeta>,
    pub grid: TimeGrid,
    pub risk_mode: RiskMode,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sequences.iter().map(|s| s.id.as_str())
    }

    /// Monthly grid up to the largest first-event or censoring time (capped at 120).
    pub fn default_grid(sequences: &[PatientSequence]) -> Result<TimeGrid> {
        let max = sequences.iter().map(|s| s.outcome.time).fold(1.0, f64::max);
        let k = (max.ceil() as usize).clamp(1, 120);
        TimeGrid::uniform(k as f64, k)
    }

    pub fn with_sequences(&self, sequences: Vec<PatientSequence>) -> Cohort {
        Cohort { sequences, ..self.clone() }
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.sequences {
            if !seen.insert(s.id.as_str()) {
                return Err(CoreError::Validation(format!("duplicate patient id `{}`", s.id)));
            }
        }
        Ok(())
    }
}

/// Averages continuous and binary features within a month and keeps the
/// last recorded category. `records` belong to a single patient.
pub fn aggregate_monthly(records: &[RawRecord], features: &[FeatureMeta]) -> Result<MonthlyMatrix> {
    let index: HashMap<&str, usize> = features.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
    let d = features.len();
    let mut months: BTreeMap<u32, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for r in records {
        let &j = index
            .get(r.feature.as_str())
            .ok_or_else(|| CoreError::Schema(format!("unknown feature `{}`", r.feature)))?;
        let meta = &features[j];
        let value = encode_value(meta, &r.value)?;
        let (sums, counts) = months.entry(r.month_index).or_insert_with(|| (vec![0.0; d], vec![0; d]));
        if meta.kind == FeatureKind::Categorical {
            sums[j] = value;
            counts[j] = 1;
        } else {
            sums[j] += value;
            counts[j] += 1;
        }
    }
    let mut out = MonthlyMatrix::default();
    for (m, (sums, counts)) in months {
        out.months.push(m);
        out.values.push(sums.iter().zip(&counts).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect());
        out.mask.push(counts.iter().map(|&c| c > 0).collect());
    }
    Ok(out)
}

fn encode_value(meta: &FeatureMeta, v: &RawValue) -> Result<f64> {
    match (meta.kind, v) {
        (FeatureKind::Categorical, RawValue::Label(l)) => meta
            .vocabulary
            .iter()
            .position(|x| x == l)
            .map(|p| p as f64)
            .ok_or_else(|| CoreError::Schema(format!("`{l}` is not in the vocabulary of `{}`", meta.name))),
        (FeatureKind::Categorical, RawValue::Number(_)) => {
            Err(CoreError::Schema(format!("categorical feature `{}` needs a label", meta.name)))
        }
        (_, RawValue::Number(x)) if x.is_finite() => Ok(*x),
        (_, RawValue::Number(x)) => Err(CoreError::Validation(format!("non-finite value {x} for `{}`", meta.name))),
        (_, RawValue::Label(l)) => Err(CoreError::Schema(format!("numeric feature `{}` got label `{l}`", meta.name))),
    }
}

fn decode_value(meta: &FeatureMeta, x: f64) -> serde_json::Value {
    match meta.kind {
        FeatureKind::Categorical => serde_json::Value::String(meta.vocabulary[x as usize].clone()),
        _ => serde_json::json!(x),
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    month: u32,
    features: BTreeMap<String, RawValue>,
}

#[derive(Serialize, Deserialize)]
struct JsonPatient {
    id: String,
    #[serde(rename = "static", default)]
    statics: BTreeMap<String, f64>,
    records: Vec<JsonRecord>,
    outcome: Outcome,
}

/// Reads a JSONL cohort (one patient per line) against a feature schema.
pub fn load_cohort(path: &Path, schema: &[FeatureMeta]) -> Result<Cohort> {
    let file = std::fs::File::open(path)?;
    read_cohort(BufReader::new(file), schema)
}

pub fn read_cohort<R: BufRead>(reader: R, schema: &[FeatureMeta]) -> Result<Cohort> {
    check_schema(schema)?;
    let mut sequences = Vec::new();
    let mut static_names: Option<Vec<String>> = None;
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: JsonPatient =
            serde_json::from_str(&line).map_err(|e| CoreError::Parse { line: line_no, message: e.to_string() })?;
        let at = |e: CoreError| match e {
            CoreError::Schema(m) => CoreError::Schema(format!("line {line_no}: {m}")),
            CoreError::Validation(m) => CoreError::Validation(format!("line {line_no}: {m}")),
            other => other,
        };
        if !seen.insert(p.id.clone()) {
            return Err(CoreError::Validation(format!("line {line_no}: duplicate patient id `{}`", p.id)));
        }
        p.outcome.validate().map_err(at)?;
        let names: Vec<String> = p.statics.keys().cloned().collect();
        match &static_names {
            None => static_names = Some(names),
            Some(expected) if *expected != names => {
                return Err(at(CoreError::Validation(format!("patient `{}` has static fields {names:?}, expected {expected:?}", p.id))))
            }
            _ => {}
        }
        if let Some((k, v)) = p.statics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(at(CoreError::Validation(format!("static `{k}` is not finite ({v})"))));
        }
        let raw: Vec<RawRecord> = p
            .records
            .into_iter()
            .flat_map(|r| {
                let pid = p.id.clone();
                r.features.into_iter().map(move |(feature, value)| RawRecord {
                    patient_id: pid.clone(),
                    month_index: r.month,
                    feature,
                    value,
                })
            })
            .collect();
        let m = aggregate_monthly(&raw, schema).map_err(at)?;
        sequences.push(PatientSequence {
            id: p.id,
            months: m.months,
            values: m.values,
            mask: m.mask,
            statics: p.statics.into_values().collect(),
            outcome: p.outcome,
        });
    }
    let static_features = static_names.unwrap_or_default().into_iter().map(FeatureMeta::continuous).collect();
    let grid = Cohort::default_grid(&sequences)?;
    Ok(Cohort { sequences, features: schema.to_vec(), static_features, grid, risk_mode: RiskMode::SemiCompeting })
}

fn check_schema(schema: &[FeatureMeta]) -> Result<()> {
    let mut names = HashSet::new();
    for f in schema {
        if !names.insert(f.name.as_str()) {
            return Err(CoreError::Schema(format!("feature `{}` declared twice", f.name)));
        }
        if f.kind == FeatureKind::Categorical && f.vocabulary.is_empty() {
            return Err(CoreError::Schema(format!("categorical feature `{}` has no vocabulary", f.name)));
        }
    }
    Ok(())
}

pub fn load_schema(path: &Path) -> Result<Vec<FeatureMeta>> {
    let text = std::fs::read_to_string(path)?;
    let schema: Vec<FeatureMeta> = serde_json::from_str(&text).map_err(|e| CoreError::Schema(e.to_string()))?;
    check_schema(&schema)?;
    Ok(schema)
}

/// Writes the cohort as JSONL; only observed entries are emitted.
pub fn write_cohort<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    for s in &cohort.sequences {
        let records = s
            .months
            .iter()
            .zip(s.values.iter().zip(&s.mask))
            .map(|(&month, (vals, mask))| {
                let features = cohort
                    .features
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| mask[*j])
                    .map(|(j, f)| {
                        let v = match decode_value(f, vals[j]) {
                            serde_json::Value::String(l) => RawValue::Label(l),
                            other => RawValue::Number(other.as_f64().expect("number")),
                        };
                        (f.name.clone(), v)
                    })
                    .collect();
                JsonRecord { month, features }
            })
            .collect();
        let statics = cohort.static_features.iter().map(|f| f.name.clone()).zip(s.statics.iter().copied()).collect();
        let p = JsonPatient { id: s.id.clone(), statics, records, outcome: s.outcome.clone() };
        serde_json::to_writer(&mut w, &p).map_err(|e| CoreError::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cohort(cohort, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Drops sequences with fewer than `min_records` observed months and keeps the last `max_len` rows.
pub fn apply_inclusion(cohort: &Cohort, min_records: usize, max_len: usize) -> Cohort {
    let sequences = cohort
        .sequences
        .iter()
        .filter(|s| s.observed_months() >= min_records)
        .map(|s| {
            let start = s.len().saturating_sub(max_len);
            PatientSequence {
                months: s.months[start..].to_vec(),
                values: s.values[start..].to_vec(),
                mask: s.mask[start..].to_vec(),
                ..s.clone()
            }
        })
        .collect();
    cohort.with_sequences(sequences)
}

/// Fit-split statistics for longitudinal and static features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub features: Vec<FeatureMeta>,
    pub static_features: Vec<FeatureMeta>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 1.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl Preprocessor {
    pub fn fit(cohort: &Cohort, fit_ids: &HashSet<String>) -> Result<Self> {
        let fit: Vec<&PatientSequence> = cohort.sequences.iter().filter(|s| fit_ids.contains(&s.id)).collect();
        if fit.is_empty() {
            return Err(CoreError::Data("fit split is empty".into()));
        }
        let mut features = cohort.features.clone();
        for (j, meta) in features.iter_mut().enumerate() {
            let observed: Vec<f64> = fit
                .iter()
                .flat_map(|s| s.values.iter().zip(&s.mask).filter(|(_, m)| m[j]).map(|(v, _)| v[j]))
                .collect();
            match meta.kind {
                FeatureKind::Continuous => {
                    let (m, s) = mean_std(&observed);
                    meta.mean = Some(m);
                    meta.std = Some(s);
                }
                FeatureKind::Categorical => {
                    let mut counts = vec![0usize; meta.vocabulary.len()];
                    for &v in &observed {
                        counts[v as usize] += 1;
                    }
                    // ties go to the lowest code
                    let mode = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map_or(0, |x| x.0);
                    meta.mode = Some(mode);
                }
                FeatureKind::BinaryCode => {}
            }
        }
        let mut static_features = cohort.static_features.clone();
        for (j, meta) in static_features.iter_mut().enumerate() {
            let xs: Vec<f64> = fit.iter().map(|s| s.statics[j]).collect();
            let (m, s) = mean_std(&xs);
            meta.mean = Some(m);
            meta.std = Some(s);
        }
        Ok(Self { features, static_features })
    }

    pub fn apply(&self, cohort: &Cohort) -> Cohort {
        let sequences = cohort
            .sequences
            .iter()
            .map(|s| {
                let values = s
                    .values
                    .iter()
                    .zip(&s.mask)
                    .map(|(row, mask)| {
                        row.iter()
                            .zip(mask)
                            .zip(&self.features)
                            .map(|((&v, &m), f)| match (f.kind, m) {
                                (FeatureKind::Continuous, true) => (v - f.mean.unwrap_or(0.0)) / f.std.unwrap_or(1.0),
                                (_, true) => v,
                                (_, false) => f.fill_value(),
                            })
                            .collect()
                    })
                    .collect();
                let statics = s
                    .statics
                    .iter()
                    .zip(&self.static_features)
                    .map(|(&v, f)| (v - f.mean.unwrap_or(0.0)) / f.std.unwrap_or(1.0))
                    .collect();
                PatientSequence { values, statics, ..s.clone() }
            })
            .collect();
        Cohort {
            sequences,
            features: self.features.clone(),
            static_features: self.static_features.clone(),
            ..cohort.clone()
        }
    }
}

/// Imputes and standardizes with statistics from `fit_ids` only.
pub fn impute_and_scale(cohort: &Cohort, fit_ids: &HashSet<String>) -> Result<(Cohort, Vec<FeatureMeta>)> {
    let p = Preprocessor::fit(cohort, fit_ids)?;
    Ok((p.apply(cohort), p.features))
}

/// Last observed value per feature (fill value if never observed), then demographics.
pub fn static_snapshot(seq: &PatientSequence, features: &[FeatureMeta]) -> Vec<f64> {
    let mut out: Vec<f64> = features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            seq.values
                .iter()
                .zip(&seq.mask)
                .rev()
                .find(|(_, m)| m[j])
                .map_or_else(|| f.fill_value(), |(v, _)| v[j])
        })
        .collect();
    out.extend_from_slice(&seq.statics);
    out
}

/// One transition of the illness–death model with its input history.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    /// Index of the source patient in the cohort.
    pub patient: usize,
    /// 0 from the initial state, 1 from hospitalization.
    pub origin: u8,
    pub months: Vec<u32>,
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    /// Hospitalization indicator per row.
    pub indicator: Vec<f64>,
    pub statics: Vec<f64>,
    pub time: f64,
    pub cause: u8,
}

/// Expands patients into transitions; semi-competing mode adds the 1→2 leg.
pub fn to_transition_records(cohort: &Cohort) -> Vec<TransitionRecord> {
    let mut out = Vec::with_capacity(cohort.len());
    for (i, s) in cohort.sequences.iter().enumerate() {
        let base = TransitionRecord {
            patient: i,
            origin: 0,
            months: s.months.clone(),
            values: s.values.clone(),
            mask: s.mask.clone(),
            indicator: vec![0.0; s.len()],
            statics: s.statics.clone(),
            time: s.outcome.time,
            cause: s.outcome.cause,
        };
        let second = match (cohort.risk_mode, &s.outcome.second) {
            (RiskMode::SemiCompeting, Some(sec)) if s.outcome.cause == 1 => Some(sec.clone()),
            _ => None,
        };
        if let Some(sec) = second {
            let mut r = base.clone();
            let last = s.months.last().copied().unwrap_or(0);
            r.months.push(last + (s.outcome.time.round() as u32).max(1));
            r.values.push(cohort.features.iter().map(FeatureMeta::fill_value).collect());
            r.mask.push(vec![false; cohort.features.len()]);
            r.indicator.push(1.0);
            r.origin = 1;
            r.time = sec.time;
            r.cause = sec.cause;
            out.push(base);
            out.push(r);
        } else {
            out.push(base);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(month: u32, feature: &str, value: RawValue) -> RawRecord {
        RawRecord { patient_id: "p".into(), month_index: month, feature: feature.into(), value }
    }

    fn schema() -> Vec<FeatureMeta> {
        vec![
            FeatureMeta::continuous("weight"),
            FeatureMeta::categorical("smoking", vec!["never".into(), "smoker".into(), "former".into()]),
        ]
    }

    #[test]
    fn monthly_mean_and_last_category() {
        let m = aggregate_monthly(
            &[
                rec(3, "weight", RawValue::Number(10.0)),
                rec(3, "weight", RawValue::Number(20.0)),
                rec(3, "smoking", RawValue::Label("smoker".into())),
                rec(3, "smoking", RawValue::Label("former".into())),
                rec(5, "weight", RawValue::Number(7.0)),
            ],
            &schema(),
        )
        .unwrap();
        assert_eq!(m.months, vec![3, 5]);
        assert_eq!(m.values[0], vec![15.0, 2.0]);
        assert_eq!(m.mask[1], vec![true, false]);
        assert!(aggregate_monthly(&[], &schema()).unwrap().months.is_empty());
    }

    #[test]
    fn unknown_feature_is_a_schema_error() {
        let e = aggregate_monthly(&[rec(0, "height", RawValue::Number(1.0))], &schema()).unwrap_err();
        assert!(matches!(e, CoreError::Schema(_)));
    }

    fn seq(id: &str, rows: Vec<(f64, bool)>, outcome: Outcome) -> PatientSequence {
        PatientSequence {
            id: id.into(),
            months: (0..rows.len() as u32).collect(),
            values: rows.iter().map(|r| vec![r.0]).collect(),
            mask: rows.iter().map(|r| vec![r.1]).collect(),
            statics: vec![],
            outcome,
        }
    }

    fn cens(t: f64) -> Outcome {
        Outcome { cause: 0, time: t, second: None }
    }

    fn one_feature(seqs: Vec<PatientSequence>) -> Cohort {
        Cohort {
            sequences: seqs,
            features: vec![FeatureMeta::continuous("x")],
            static_features: vec![],
            grid: TimeGrid::uniform(12.0, 12).unwrap(),
            risk_mode: RiskMode::SemiCompeting,
        }
    }

    #[test]
    fn impute_and_scale_uses_fit_split() {
        let c = one_feature(vec![
            seq("a", vec![(1.0, true)], cens(1.0)),
            seq("b", vec![(3.0, true)], cens(1.0)),
            seq("c", vec![(0.0, false)], cens(1.0)),
        ]);
        let fit: HashSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let (out, metas) = impute_and_scale(&c, &fit).unwrap();
        assert_eq!(metas[0].mean, Some(2.0));
        let vals: Vec<f64> = out.sequences.iter().map(|s| s.values[0][0]).collect();
        assert_eq!(vals, vec![-1.0, 1.0, 0.0]);
        assert!(impute_and_scale(&c, &HashSet::new()).is_err());
    }

    #[test]
    fn constant_feature_scales_to_zero() {
        let c = one_feature(vec![seq("a", vec![(4.0, true), (4.0, true)], cens(1.0))]);
        let fit: HashSet<String> = ["a".to_string()].into();
        let (out, metas) = impute_and_scale(&c, &fit).unwrap();
        assert_eq!(metas[0].std, Some(1.0));
        assert!(out.sequences[0].values.iter().all(|r| r[0] == 0.0));
    }

    #[test]
    fn inclusion_rules() {
        let short = seq("s", vec![(1.0, true); 3], cens(1.0));
        let long = seq("l", vec![(1.0, true); 30], cens(1.0));
        let exact = seq("e", vec![(1.0, true); 24], cens(1.0));
        let c = apply_inclusion(&one_feature(vec![short, long, exact.clone()]), 4, 24);
        assert_eq!(c.len(), 2);
        assert_eq!(c.sequences[0].months, (6..30).collect::<Vec<u32>>());
        assert_eq!(c.sequences[1], exact);
    }

    #[test]
    fn snapshot_takes_last_observation() {
        let mut s = seq("a", vec![(5.0, true), (0.0, false), (9.0, true), (0.0, false)], cens(1.0));
        s.statics = vec![0.5, 1.0];
        let f = [FeatureMeta::continuous("x")];
        assert_eq!(static_snapshot(&s, &f), vec![9.0, 0.5, 1.0]);
        let never = seq("b", vec![(0.0, false)], cens(1.0));
        assert_eq!(static_snapshot(&never, &f), vec![0.0]);
    }

    #[test]
    fn transitions_follow_the_illness_death_graph() {
        let hosp_then_death = Outcome { cause: 1, time: 2.0, second: Some(SecondEvent { time: 3.0, cause: 2 }) };
        let mut c = one_feature(vec![
            seq("censored", vec![(1.0, true); 4], cens(5.0)),
            seq("ill", vec![(1.0, true); 4], hosp_then_death),
        ]);
        let recs = to_transition_records(&c);
        assert_eq!(recs.len(), 3);
        assert_eq!((recs[0].origin, recs[0].cause), (0, 0));
        assert_eq!((recs[1].origin, recs[1].cause), (0, 1));
        assert_eq!((recs[2].origin, recs[2].cause, recs[2].time), (1, 2, 3.0));
        assert_eq!(recs[2].indicator, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(recs[2].months.last(), Some(&5));
        c.risk_mode = RiskMode::Competing;
        let recs = to_transition_records(&c);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].cause, 1);
    }

    #[test]
    fn outcome_validation() {
        assert!(Outcome { cause: 0, time: 0.0, second: None }.validate().is_err());
        assert!(Outcome { cause: 2, time: 1.0, second: Some(SecondEvent { time: 1.0, cause: 2 }) }.validate().is_err());
        assert!(Outcome { cause: 3, time: 1.0, second: None }.validate().is_err());
    }

    #[test]
    fn duplicate_ids_rejected_with_name() {
        let line = r#"{"id":"p1","static":{},"records":[{"month":0,"features":{"weight":1.0}}],"outcome":{"cause":0,"time":2.0,"second":null}}"#;
        let text = format!("{line}\n{line}\n");
        let e = read_cohort(text.as_bytes(), &schema()).unwrap_err();
        assert!(e.to_string().contains("p1"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"id":"p1","static":{},"records":[],"outcome":{"cause":0,"time":2.0,"second":null}}"#;
        let text = format!("{good}\n{{not json\n");
        match read_cohort(text.as_bytes(), &schema()).unwrap_err() {
            CoreError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn nonpositive_time_rejected() {
        let bad = r#"{"id":"p1","static":{},"records":[],"outcome":{"cause":1,"time":0.0,"second":null}}"#;
        assert!(matches!(read_cohort(bad.as_bytes(), &schema()).unwrap_err(), CoreError::Validation(_)));
    }
}
