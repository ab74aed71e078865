//! Case-level and voxel-level evaluation quantities.
//!
//! Degenerate denominators evaluate to 0 (precision with no predicted
//! positives, F1 when precision and sensitivity are both 0, sensitivity or
//! specificity for an absent class). Two empty masks have Dice 1.

mod calibration;
mod export;
mod report;
mod roc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibration::{calibrate_threshold, isotonic_fit, Calibration, CalibrationMap};
pub use export::{export, export_bars_svg, export_csv, export_roc_svg, parse_csv, CsvRow, ExportFormat, CSV_HEADER};
pub use report::{CaseOutcome, CaseRow, EvaluationReport};
pub use roc::{mann_whitney_auc, roc_auc, RocPoint};

use crate::grid::Mask;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no cases to evaluate")]
    EmptyInput,
    #[error("both positive and negative cases are required")]
    OneClassOnly,
    #[error("mask shapes differ: {0} vs {1}")]
    ShapeMismatch(String, String),
    #[error("unsupported export format {0:?}")]
    UnsupportedFormat(String),
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One case's scalar score and reference label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub score: f64,
    pub positive: bool,
}

impl ScoredCase {
    pub fn new(score: f64, positive: bool) -> Self {
        Self { score, positive }
    }
}

pub(crate) fn check_scores(cases: &[ScoredCase]) -> Result<(usize, usize), MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(bad) = cases.iter().find(|c| !c.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore(bad.score));
    }
    let pos = cases.iter().filter(|c| c.positive).count();
    Ok((pos, cases.len() - pos))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn new(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.positives() + self.negatives()
    }

    pub fn add(&mut self, predicted: bool, positive: bool) {
        match (predicted, positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn metrics(&self) -> BasicMetrics {
        basic_metrics(self)
    }
}

/// Predicted positive iff `score >= threshold`.
pub fn confusion(cases: &[ScoredCase], threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    check_scores(cases)?;
    let mut c = ConfusionCounts::default();
    for case in cases {
        c.add(case.score >= threshold, case.positive);
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub sens: f64,
    pub spec: f64,
    pub accu: f64,
    pub preci: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn basic_metrics(c: &ConfusionCounts) -> BasicMetrics {
    let sens = ratio(c.tp, c.tp + c.fn_);
    let spec = ratio(c.tn, c.tn + c.fp);
    let preci = ratio(c.tp, c.tp + c.fp);
    let f1 = if preci + sens == 0.0 {
        0.0
    } else {
        2.0 * preci * sens / (preci + sens)
    };
    BasicMetrics {
        sens,
        spec,
        accu: ratio(c.tp + c.tn, c.total()),
        preci,
        f1,
    }
}

/// `2|A∩B| / (|A|+|B|)`.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_string(), b.shape().to_string()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Best sensitivity over thresholds whose specificity is at least `min_spec`.
pub fn sens_at_spec(cases: &[ScoredCase], min_spec: f64) -> Result<f64, MetricsError> {
    let (_, points) = roc_auc(cases)?;
    Ok(points
        .iter()
        .filter(|p| 1.0 - p.fpr >= min_spec - 1e-12)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests;
