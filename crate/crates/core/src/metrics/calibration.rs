use serde::{Deserialize, Serialize};

use super::{check_scores, MetricsError, ScoredCase};

/// Monotone piecewise-linear score-to-confidence map. An empty knot list is
/// the identity. Outside the knot range the map is clamped to the end values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub knots: Vec<(f64, f64)>,
}

impl CalibrationMap {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn apply(&self, x: f64) -> f64 {
        let k = &self.knots;
        match k.len() {
            0 => x,
            1 => k[0].1,
            _ => {
                if x <= k[0].0 {
                    return k[0].1;
                }
                if x >= k[k.len() - 1].0 {
                    return k[k.len() - 1].1;
                }
                // First knot strictly right of x.
                let i = k.partition_point(|&(kx, _)| kx <= x);
                let (x0, y0) = k[i - 1];
                let (x1, y1) = k[i];
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

/// Pool-adjacent-violators fit of labels on scores. Knots sit at the
/// weighted mean score of each pooled block.
pub fn isotonic_fit(cases: &[ScoredCase]) -> Result<CalibrationMap, MetricsError> {
    check_scores(cases)?;
    let mut sorted = cases.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // (sum of scores, sum of labels, weight); equal scores start pooled.
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let mut block = (0.0, 0.0, 0.0);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            block.0 += sorted[j].score;
            block.1 += sorted[j].positive as u8 as f64;
            block.2 += 1.0;
            j += 1;
        }
        blocks.push(block);
        while blocks.len() >= 2 {
            let n = blocks.len();
            let (a, b) = (blocks[n - 2], blocks[n - 1]);
            if a.1 / a.2 > b.1 / b.2 {
                blocks.pop();
                blocks[n - 2] = (a.0 + b.0, a.1 + b.1, a.2 + b.2);
            } else {
                break;
            }
        }
        i = j;
    }
    Ok(CalibrationMap {
        knots: blocks.iter().map(|b| (b.0 / b.2, b.1 / b.2)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub youden_j: f64,
    pub map: CalibrationMap,
}

/// Youden-optimal threshold over midpoints of adjacent distinct scores
/// (ties go to the higher threshold), plus an isotonic confidence map.
///
/// With a single distinct score there is no midpoint; that score is
/// returned with J = 0.
pub fn calibrate_threshold(cases: &[ScoredCase]) -> Result<Calibration, MetricsError> {
    let (pos, neg) = check_scores(cases)?;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut sorted = cases.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Walking upward, everything left of the cut is predicted negative.
    // J·P·N = tp·N + tn·P − P·N, compared as integers.
    let (p, n) = (pos as i128, neg as i128);
    let mut tp = p;
    let mut tn = 0i128;
    let mut best: Option<(i128, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].positive {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let threshold = (s + sorted[i].score) / 2.0;
        let numerator = tp * n + tn * p - p * n;
        // `>=` because thresholds increase along the walk.
        if best.is_none_or(|(b, _)| numerator >= b) {
            best = Some((numerator, threshold));
        }
    }
    let map = isotonic_fit(cases)?;
    Ok(match best {
        Some((num, threshold)) => Calibration {
            threshold,
            youden_j: num as f64 / (p * n) as f64,
            map,
        },
        None => Calibration {
            threshold: sorted[0].score,
            youden_j: 0.0,
            map,
        },
    })
}
