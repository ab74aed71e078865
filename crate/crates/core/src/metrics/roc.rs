use serde::{Deserialize, Serialize};

use super::{check_scores, MetricsError, ScoredCase};

/// One operating point. `threshold` is `None` for the initial (0,0) point,
/// which corresponds to a threshold above every score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: Option<f64>,
}

/// Sweep every distinct score as a `score >= t` threshold, highest first.
/// Returns the trapezoidal AUC and the curve from (0,0) to (1,1).
pub fn roc_auc(cases: &[ScoredCase]) -> Result<(f64, Vec<RocPoint>), MetricsError> {
    let (pos, neg) = check_scores(cases)?;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut sorted: Vec<ScoredCase> = cases.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: Some(t),
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum();
    Ok((auc, points))
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn mann_whitney_auc(cases: &[ScoredCase]) -> Result<f64, MetricsError> {
    let (pos, neg) = check_scores(cases)?;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    // Rank-sum form with midranks for ties.
    let mut sorted: Vec<ScoredCase> = cases.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * sorted[i..j].iter().filter(|c| c.positive).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}
