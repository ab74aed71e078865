use serde::{Deserialize, Serialize};

use super::{basic_metrics, roc_auc, ConfusionCounts, MetricsError, RocPoint, ScoredCase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseOutcome {
    TruePositive,
    FalsePositive,
    TrueNegative,
    FalseNegative,
}

impl CaseOutcome {
    pub fn of(predicted: bool, positive: bool) -> Self {
        match (predicted, positive) {
            (true, true) => CaseOutcome::TruePositive,
            (true, false) => CaseOutcome::FalsePositive,
            (false, false) => CaseOutcome::TrueNegative,
            (false, true) => CaseOutcome::FalseNegative,
        }
    }

    pub fn is_error(self) -> bool {
        matches!(self, CaseOutcome::FalsePositive | CaseOutcome::FalseNegative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: u64,
    pub positive: bool,
    pub score: f64,
    pub predicted: bool,
    pub outcome: CaseOutcome,
    /// Present for positive cases that have a ground-truth mask.
    pub dice: Option<f64>,
    pub lesion_count: usize,
    pub total_volume_ml: f64,
    pub result_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub partition: String,
    pub dice: Option<f64>,
    pub sens: f64,
    pub spec: f64,
    pub auc: f64,
    pub accu: f64,
    pub preci: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub roc_points: Vec<RocPoint>,
    pub per_case: Vec<CaseRow>,
    /// Cases left out because their label is unknown.
    #[serde(default)]
    pub skipped_unlabeled: usize,
}

impl EvaluationReport {
    /// Confusion counts come from each row's `predicted` flag; the ROC curve
    /// and AUC from the rows' scores; Dice is the unweighted mean over rows
    /// that carry one.
    pub fn from_rows(model: impl Into<String>, partition: impl Into<String>, rows: Vec<CaseRow>) -> Result<Self, MetricsError> {
        let scored: Vec<ScoredCase> = rows.iter().map(|r| ScoredCase::new(r.score, r.positive)).collect();
        let (auc, roc_points) = roc_auc(&scored)?;
        let mut counts = ConfusionCounts::default();
        for r in &rows {
            counts.add(r.predicted, r.positive);
        }
        let m = basic_metrics(&counts);
        let dices: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
        Ok(Self {
            model: model.into(),
            partition: partition.into(),
            dice: if dices.is_empty() {
                None
            } else {
                Some(dices.iter().sum::<f64>() / dices.len() as f64)
            },
            sens: m.sens,
            spec: m.spec,
            auc,
            accu: m.accu,
            preci: m.preci,
            f1: m.f1,
            counts,
            roc_points,
            per_case: rows,
            skipped_unlabeled: 0,
        })
    }

    pub fn scored_cases(&self) -> Vec<ScoredCase> {
        self.per_case.iter().map(|r| ScoredCase::new(r.score, r.positive)).collect()
    }
}
