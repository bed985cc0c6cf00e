//! Tables written by `cv` and `report`.

use std::path::Path;

use serde::Serialize;
use survbench_core::cohort::{Cohort, RiskMode};
use survbench_core::design::N_CAUSES;
use survbench_core::estimators::AalenJohansen;
use survbench_core::eval::{significance_code, wilcoxon_signed_rank, MetricReport};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Concordance,
    CumulativeAuc,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Concordance, Metric::CumulativeAuc];

    pub fn label(self) -> &'static str {
        match self {
            Self::Concordance => "C-index",
            Self::CumulativeAuc => "Cum-AUC",
        }
    }

    /// Per-fold values keyed by 1-based fold number.
    fn by_fold(self, r: &MetricReport, cause: usize) -> Vec<(usize, f64)> {
        r.folds
            .iter()
            .filter_map(|f| {
                let v = match self {
                    Self::Concordance => f.concordance[cause - 1],
                    Self::CumulativeAuc => f.auc[cause - 1],
                };
                v.map(|v| (f.fold, v))
            })
            .collect()
    }

    fn summary(self, r: &MetricReport, cause: usize) -> Option<(f64, f64)> {
        match self {
            Self::Concordance => r.concordance_summary(cause),
            Self::CumulativeAuc => r.auc_summary(cause),
        }
    }
}

pub fn panel_label(mode: RiskMode) -> &'static str {
    match mode {
        RiskMode::SemiCompeting => "(a) Semi-competing",
        RiskMode::Competing => "(b) Competing",
    }
}

/// Paired comparison of one model against the column's best model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub panel: String,
    pub metric: String,
    pub event: usize,
    pub model: String,
    pub reference: String,
    pub n: usize,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub code: String,
}

/// Signed-rank tests of every model against the best mean in each column.
pub fn comparisons(reports: &[MetricReport]) -> Vec<Comparison> {
    let mut out = Vec::new();
    for mode in modes_of(reports) {
        let panel: Vec<&MetricReport> = reports.iter().filter(|r| r.risk_mode == mode).collect();
        for metric in Metric::ALL {
            for cause in 1..=N_CAUSES {
                let best = panel
                    .iter()
                    .filter_map(|r| metric.summary(r, cause).map(|(m, _)| (r, m)))
                    .fold(None::<(&&MetricReport, f64)>, |acc, (r, m)| match acc {
                        Some((_, bm)) if bm >= m => acc,
                        _ => Some((r, m)),
                    });
                let Some((best, _)) = best else { continue };
                let reference = metric.by_fold(best, cause);
                for r in &panel {
                    if std::ptr::eq(*r, *best) {
                        continue;
                    }
                    let own = metric.by_fold(r, cause);
                    let (a, b): (Vec<f64>, Vec<f64>) = own
                        .iter()
                        .filter_map(|(f, v)| reference.iter().find(|(g, _)| g == f).map(|(_, w)| (*v, *w)))
                        .unzip();
                    let test = wilcoxon_signed_rank(&a, &b).ok();
                    let p = test.as_ref().map(|t| t.p_value);
                    out.push(Comparison {
                        panel: panel_label(mode).into(),
                        metric: metric.label().into(),
                        event: cause,
                        model: r.model.clone(),
                        reference: best.model.clone(),
                        n: a.len(),
                        statistic: test.as_ref().map(|t| t.statistic + 0.0),
                        p_value: p,
                        code: p.map_or(String::new(), |p| significance_code(p).to_string()),
                    });
                }
            }
        }
    }
    out
}

fn modes_of(reports: &[MetricReport]) -> Vec<RiskMode> {
    let mut modes: Vec<RiskMode> = Vec::new();
    for r in reports {
        if !modes.contains(&r.risk_mode) {
            modes.push(r.risk_mode);
        }
    }
    modes
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::output(path, e))
}

/// Models as rows, metric × event as columns, cells `mean(std)` plus the
/// significance code against the column's best model.
pub fn write_metrics(path: &Path, reports: &[MetricReport], tests: &[Comparison]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| CliError::output(path, e);
    let mut header = vec!["panel".to_string(), "model".to_string()];
    for metric in Metric::ALL {
        for cause in 1..=N_CAUSES {
            header.push(format!("{} event {cause}", metric.label()));
        }
    }
    w.write_record(&header).map_err(err)?;
    for mode in modes_of(reports) {
        for r in reports.iter().filter(|r| r.risk_mode == mode) {
            let mut row = vec![panel_label(mode).to_string(), r.model.clone()];
            for metric in Metric::ALL {
                for cause in 1..=N_CAUSES {
                    let code = tests
                        .iter()
                        .find(|t| {
                            t.panel == panel_label(mode)
                                && t.metric == metric.label()
                                && t.event == cause
                                && t.model == r.model
                        })
                        .map_or("", |t| t.code.as_str());
                    row.push(match metric.summary(r, cause) {
                        Some((m, s)) => format!("{m:.3}({s:.3}){code}"),
                        None => "NA".into(),
                    });
                }
            }
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn write_wilcoxon(path: &Path, tests: &[Comparison]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for t in tests {
        w.serialize(t).map_err(|e| CliError::output(path, e))?;
    }
    if tests.is_empty() {
        w.write_record(["panel", "metric", "event", "model", "reference", "n", "statistic", "p_value", "code"])
            .map_err(|e| CliError::output(path, e))?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

/// Aalen-Johansen incidence of the first event, overall and per level of `strata`.
pub fn write_cif_curves(path: &Path, cohort: &Cohort, strata: Option<&str>) -> Result<()> {
    let mut groups: Vec<(String, Vec<usize>)> = vec![("all".into(), (0..cohort.len()).collect())];
    if let Some(name) = strata {
        let col = cohort
            .static_features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| CliError::Config(format!("stratification variable `{name}` is not a static feature")))?;
        let mut levels: Vec<f64> = cohort.sequences.iter().map(|s| s.statics[col]).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for level in levels {
            let idx = (0..cohort.len()).filter(|&i| cohort.sequences[i].statics[col] == level).collect();
            groups.push((format!("{name}={level}"), idx));
        }
    }
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| CliError::output(path, e);
    w.write_record(["stratum", "time", "event", "cif"]).map_err(err)?;
    for (label, idx) in groups {
        let times: Vec<f64> = idx.iter().map(|&i| cohort.sequences[i].outcome.time).collect();
        let causes: Vec<u8> = idx.iter().map(|&i| cohort.sequences[i].outcome.cause).collect();
        let aj = AalenJohansen::fit(&times, &causes, N_CAUSES).map_err(|e| CliError::stage("incidence curves", e))?;
        let curves = aj.on_grid(&cohort.grid);
        for (c, curve) in curves.iter().enumerate() {
            for (t, v) in cohort.grid.points().iter().zip(curve) {
                w.write_record([label.clone(), format!("{t}"), (c + 1).to_string(), format!("{v:.6}")]).map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::output(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::output(path, e))
}
