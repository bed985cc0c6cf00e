//! Numeric model inputs built from preprocessed transition records.

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, FeatureKind, FeatureMeta, RiskMode, TransitionRecord};
use crate::grid::TimeGrid;

pub const N_CAUSES: usize = 2;
pub const INDICATOR_NAME: &str = "hospitalized";
pub const GAP_NAME: &str = "months_since_previous";

/// Column layout shared by every representation of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Names of the encoded longitudinal columns (categoricals one-hot, reference level dropped).
    pub feature_columns: Vec<String>,
    /// Source feature of each encoded column.
    pub column_feature: Vec<usize>,
    pub static_names: Vec<String>,
    pub features: Vec<FeatureMeta>,
}

impl Layout {
    pub fn new(features: &[FeatureMeta], statics: &[FeatureMeta]) -> Self {
        let mut feature_columns = Vec::new();
        let mut column_feature = Vec::new();
        for (j, f) in features.iter().enumerate() {
            match f.kind {
                FeatureKind::Categorical => {
                    for level in f.vocabulary.iter().skip(1) {
                        feature_columns.push(format!("{}={level}", f.name));
                        column_feature.push(j);
                    }
                }
                _ => {
                    feature_columns.push(f.name.clone());
                    column_feature.push(j);
                }
            }
        }
        Self {
            feature_columns,
            column_feature,
            static_names: statics.iter().map(|s| s.name.clone()).collect(),
            features: features.to_vec(),
        }
    }

    pub fn n_encoded(&self) -> usize {
        self.feature_columns.len()
    }

    fn encode_row(&self, row: &[f64], mask: &[bool], out: &mut Vec<f64>, out_mask: &mut Vec<bool>) {
        for (j, f) in self.features.iter().enumerate() {
            match f.kind {
                FeatureKind::Categorical => {
                    let code = row[j] as usize;
                    for level in 1..f.vocabulary.len() {
                        out.push((code == level) as u8 as f64);
                        out_mask.push(mask[j]);
                    }
                }
                _ => {
                    out.push(row[j]);
                    out_mask.push(mask[j]);
                }
            }
        }
    }

    /// Names of snapshot columns: encoded features, demographics, indicator.
    pub fn snapshot_names(&self) -> Vec<String> {
        let mut v = self.feature_columns.clone();
        v.extend(self.static_names.iter().cloned());
        v.push(INDICATOR_NAME.to_string());
        v
    }

    /// Names of per-step sequence inputs: the snapshot columns, one observed
    /// flag per source feature, and the gap in months since the previous row.
    pub fn step_names(&self) -> Vec<String> {
        let mut v = self.snapshot_names();
        v.extend(self.features.iter().map(|f| format!("observed:{}", f.name)));
        v.push(GAP_NAME.to_string());
        v
    }
}

/// Everything a model needs, one row per transition record.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub grid: TimeGrid,
    pub risk_mode: RiskMode,
    pub layout: Layout,
    pub time: Vec<f64>,
    pub cause: Vec<u8>,
    pub origin: Vec<u8>,
    pub patient: Vec<usize>,
    /// Last observation per encoded column, demographics, indicator.
    pub snapshot: Vec<Vec<f64>>,
    /// Per-step inputs `T × p` in [`Layout::step_names`] order.
    pub seq: Vec<Vec<Vec<f64>>>,
    /// Observed flags of the encoded longitudinal columns, `T × q`.
    pub seq_mask: Vec<Vec<Vec<bool>>>,
    /// Numeric snapshot part (non-categorical features, demographics, indicator).
    pub numeric: Vec<Vec<f64>>,
    pub numeric_names: Vec<String>,
    /// Category code per categorical feature.
    pub categorical: Vec<Vec<usize>>,
    pub vocab_sizes: Vec<usize>,
}

impl ModelData {
    pub fn new(cohort: &Cohort, records: &[TransitionRecord]) -> Self {
        let layout = Layout::new(&cohort.features, &cohort.static_features);
        let n = records.len();
        let mut data = ModelData {
            grid: cohort.grid.clone(),
            risk_mode: cohort.risk_mode,
            time: Vec::with_capacity(n),
            cause: Vec::with_capacity(n),
            origin: Vec::with_capacity(n),
            patient: Vec::with_capacity(n),
            snapshot: Vec::with_capacity(n),
            seq: Vec::with_capacity(n),
            seq_mask: Vec::with_capacity(n),
            numeric: Vec::with_capacity(n),
            numeric_names: Vec::new(),
            categorical: Vec::with_capacity(n),
            vocab_sizes: cohort
                .features
                .iter()
                .filter(|f| f.kind == FeatureKind::Categorical)
                .map(|f| f.vocabulary.len())
                .collect(),
            layout,
        };
        for (j, f) in cohort.features.iter().enumerate() {
            if f.kind != FeatureKind::Categorical {
                data.numeric_names.push(cohort.features[j].name.clone());
            }
        }
        data.numeric_names.extend(data.layout.static_names.iter().cloned());
        data.numeric_names.push(INDICATOR_NAME.to_string());

        for r in records {
            let mut steps = Vec::with_capacity(r.months.len());
            let mut masks = Vec::with_capacity(r.months.len());
            let mut last: Vec<Option<f64>> = vec![None; cohort.features.len()];
            for (t, (row, mask)) in r.values.iter().zip(&r.mask).enumerate() {
                let mut enc = Vec::new();
                let mut enc_mask = Vec::new();
                data.layout.encode_row(row, mask, &mut enc, &mut enc_mask);
                enc.extend_from_slice(&r.statics);
                enc.push(r.indicator[t]);
                enc.extend(mask.iter().map(|&m| m as u8 as f64));
                enc.push(if t == 0 { 0.0 } else { f64::from(r.months[t] - r.months[t - 1]) });
                steps.push(enc);
                masks.push(enc_mask);
                for j in 0..row.len() {
                    if mask[j] {
                        last[j] = Some(row[j]);
                    }
                }
            }
            let last_row: Vec<f64> =
                last.iter().zip(&cohort.features).map(|(v, f)| v.unwrap_or_else(|| f.fill_value())).collect();
            let mut snap = Vec::new();
            let mut ignored = Vec::new();
            data.layout.encode_row(&last_row, &vec![true; last_row.len()], &mut snap, &mut ignored);
            snap.extend_from_slice(&r.statics);
            snap.push(r.origin as f64);

            let mut numeric = Vec::new();
            let mut cats = Vec::new();
            for (j, f) in cohort.features.iter().enumerate() {
                if f.kind == FeatureKind::Categorical {
                    cats.push(last_row[j] as usize);
                } else {
                    numeric.push(last_row[j]);
                }
            }
            numeric.extend_from_slice(&r.statics);
            numeric.push(r.origin as f64);

            data.time.push(r.time);
            data.cause.push(r.cause);
            data.origin.push(r.origin);
            data.patient.push(r.patient);
            data.snapshot.push(snap);
            data.seq.push(steps);
            data.seq_mask.push(masks);
            data.numeric.push(numeric);
            data.categorical.push(cats);
        }
        data
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn n_snapshot(&self) -> usize {
        self.layout.n_encoded() + self.layout.static_names.len() + 1
    }

    pub fn n_step(&self) -> usize {
        self.n_snapshot() + self.layout.features.len() + 1
    }

    /// Records eligible as subjects for metrics of `cause`: a first hospitalization
    /// can only follow the initial state.
    pub fn eligible(&self, cause: usize, idx: &[usize]) -> Vec<usize> {
        idx.iter().copied().filter(|&i| cause != 1 || self.origin[i] == 0).collect()
    }

    pub fn times_of(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.time[i]).collect()
    }

    pub fn causes_of(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.cause[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Outcome, PatientSequence, SecondEvent};

    #[test]
    fn one_hot_drops_reference_and_snapshot_has_indicator() {
        let cohort = Cohort {
            sequences: vec![PatientSequence {
                id: "a".into(),
                months: vec![0, 1],
                values: vec![vec![0.5, 2.0], vec![0.7, 0.0]],
                mask: vec![vec![true, true], vec![true, false]],
                statics: vec![1.5],
                outcome: Outcome { cause: 1, time: 2.0, second: Some(SecondEvent { time: 1.0, cause: 2 }) },
            }],
            features: vec![
                FeatureMeta::continuous("w"),
                FeatureMeta::categorical("s", vec!["a".into(), "b".into(), "c".into()]),
            ],
            static_features: vec![FeatureMeta::continuous("age")],
            grid: TimeGrid::uniform(4.0, 4).unwrap(),
            risk_mode: RiskMode::SemiCompeting,
        };
        let recs = crate::cohort::to_transition_records(&cohort);
        let d = ModelData::new(&cohort, &recs);
        assert_eq!(d.layout.feature_columns, vec!["w", "s=b", "s=c"]);
        assert_eq!(d.snapshot[0], vec![0.7, 0.0, 1.0, 1.5, 0.0]);
        assert_eq!(d.snapshot[1], vec![0.7, 0.0, 1.0, 1.5, 1.0]);
        assert_eq!(d.seq[1].len(), 3);
        assert_eq!(d.seq[1][2][4], 1.0);
        assert_eq!(d.seq[0][1][5..], [1.0, 0.0, 1.0]);
        assert_eq!(d.seq[0][1].len(), d.n_step());
        assert_eq!(d.layout.step_names().len(), d.n_step());
        assert_eq!(d.seq_mask[0][1], vec![true, false, false]);
        assert_eq!(d.numeric[0], vec![0.7, 1.5, 0.0]);
        assert_eq!(d.categorical[0], vec![2]);
        assert_eq!(d.eligible(1, &[0, 1]), vec![0]);
    }
}
