//! Voxel-wise logistic regression over the handcrafted features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, in_tissue_window, FEATURE_COUNT};
use super::ModelError;
use crate::dicom::VolumeImage;
use crate::grid::{Grid, Mask, ProbMap};

pub const MAX_POSITIVE_WEIGHT: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Upweight positive voxels by `neg / pos`, capped at [`MAX_POSITIVE_WEIGHT`].
    pub class_balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            learning_rate: 0.5,
            batch_size: 4096,
            seed: 7,
            class_balance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub case_count: usize,
    pub positive_weight: f64,
    /// Full-data weighted loss after each epoch.
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub weights: [f64; FEATURE_COUNT],
    pub bias: f64,
    pub feature_mean: [f64; FEATURE_COUNT],
    pub feature_std: [f64; FEATURE_COUNT],
    pub training: Option<TrainingMetadata>,
}

impl ClassifierParams {
    /// Untrained parameters with identity normalization.
    pub fn zeros() -> Self {
        Self {
            weights: [0.0; FEATURE_COUNT],
            bias: 0.0,
            feature_mean: [0.0; FEATURE_COUNT],
            feature_std: [1.0; FEATURE_COUNT],
            training: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.feature_std.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.weights.iter().chain(self.feature_mean.iter()).all(|v| v.is_finite())
            && self.bias.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidParams(
                "weights must be finite and normalization stds positive".into(),
            ))
        }
    }

    #[inline]
    pub fn normalize(&self, raw: &[f64; FEATURE_COUNT]) -> [f64; FEATURE_COUNT] {
        let mut out = [0.0; FEATURE_COUNT];
        for k in 0..FEATURE_COUNT {
            out[k] = (raw[k] - self.feature_mean[k]) / self.feature_std[k];
        }
        out
    }

    #[inline]
    pub fn probability(&self, raw: &[f64; FEATURE_COUNT]) -> f64 {
        let x = self.normalize(raw);
        sigmoid(logit(&self.weights, self.bias, &x))
    }

    /// Per-voxel probabilities for a volume.
    pub fn predict(&self, volume: &VolumeImage) -> ProbMap {
        extract_features(volume).map(|f| self.probability(&f.0))
    }
}

#[inline]
fn logit(w: &[f64; FEATURE_COUNT], b: f64, x: &[f64; FEATURE_COUNT]) -> f64 {
    w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Weighted mean binary cross-entropy and its gradient with respect to
/// `(weights..., bias)` on already-normalized features.
pub fn loss_and_gradient(
    weights: &[f64; FEATURE_COUNT],
    bias: f64,
    xs: &[[f64; FEATURE_COUNT]],
    ys: &[f64],
    sample_weights: &[f64],
) -> (f64, [f64; FEATURE_COUNT + 1]) {
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURE_COUNT + 1];
    let mut total = 0.0;
    for ((x, &y), &w) in xs.iter().zip(ys).zip(sample_weights) {
        let z = logit(weights, bias, x);
        loss += w * (softplus(z) - y * z);
        let r = w * (sigmoid(z) - y);
        for k in 0..FEATURE_COUNT {
            grad[k] += r * x[k];
        }
        grad[FEATURE_COUNT] += r;
        total += w;
    }
    if total > 0.0 {
        loss /= total;
        grad.iter_mut().for_each(|g| *g /= total);
    }
    (loss, grad)
}

struct Samples {
    xs: Vec<[f64; FEATURE_COUNT]>,
    ys: Vec<f64>,
}

/// Fit the classifier on `(volume, ground-truth mask)` pairs by mini-batch
/// gradient descent. Samples are the soft-tissue voxels plus every mask voxel. Deterministic for a fixed seed and input order.
pub fn train(cases: &[(&VolumeImage, &Mask)], config: &TrainConfig) -> Result<ClassifierParams, ModelError> {
    if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(ModelError::InvalidConfig(
            "epochs, batch size and learning rate must be positive".into(),
        ));
    }
    let mut samples = Samples {
        xs: Vec::new(),
        ys: Vec::new(),
    };
    for (volume, mask) in cases {
        mask.ensure_shape(volume.shape())?;
        let features = extract_features(volume);
        for (f, &m) in features.as_slice().iter().zip(mask.as_slice()) {
            if in_tissue_window(f.hu()) || m {
                samples.xs.push(f.0);
                samples.ys.push(if m { 1.0 } else { 0.0 });
            }
        }
    }
    let positives = samples.ys.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 {
        return Err(ModelError::NoPositiveVoxels);
    }
    let negatives = samples.ys.len() - positives;

    let n = samples.xs.len() as f64;
    let mut mean = [0.0; FEATURE_COUNT];
    for x in &samples.xs {
        for k in 0..FEATURE_COUNT {
            mean[k] += x[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; FEATURE_COUNT];
    for x in &samples.xs {
        for k in 0..FEATURE_COUNT {
            std[k] += (x[k] - mean[k]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }

    let mut params = ClassifierParams {
        weights: [0.0; FEATURE_COUNT],
        bias: 0.0,
        feature_mean: mean,
        feature_std: std,
        training: None,
    };
    for x in &mut samples.xs {
        *x = params.normalize(x);
    }
    let positive_weight = if config.class_balance {
        (negatives as f64 / positives as f64).clamp(1.0, MAX_POSITIVE_WEIGHT)
    } else {
        1.0
    };
    let sample_weights: Vec<f64> = samples
        .ys
        .iter()
        .map(|&y| if y > 0.5 { positive_weight } else { 1.0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.xs.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut bx = Vec::with_capacity(config.batch_size);
    let mut by = Vec::with_capacity(config.batch_size);
    let mut bw = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            bw.clear();
            for &i in chunk {
                bx.push(samples.xs[i]);
                by.push(samples.ys[i]);
                bw.push(sample_weights[i]);
            }
            let (_, grad) = loss_and_gradient(&params.weights, params.bias, &bx, &by, &bw);
            for k in 0..FEATURE_COUNT {
                params.weights[k] -= config.learning_rate * grad[k];
            }
            params.bias -= config.learning_rate * grad[FEATURE_COUNT];
        }
        let (loss, _) = loss_and_gradient(&params.weights, params.bias, &samples.xs, &samples.ys, &sample_weights);
        loss_history.push(loss);
    }

    params.training = Some(TrainingMetadata {
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        seed: config.seed,
        case_count: cases.len(),
        positive_weight,
        final_loss: *loss_history.last().unwrap(),
        loss_history,
    });
    params.validate()?;
    Ok(params)
}

/// Fraction of voxels whose thresholded prediction (p >= 0.5) matches the mask.
pub fn voxel_accuracy(params: &ClassifierParams, cases: &[(&VolumeImage, &Mask)]) -> f64 {
    let mut right = 0usize;
    let mut total = 0usize;
    for (volume, mask) in cases {
        let p: Grid<f64> = params.predict(volume);
        for (&p, &m) in p.as_slice().iter().zip(mask.as_slice()) {
            right += ((p >= 0.5) == m) as usize;
            total += 1;
        }
    }
    right as f64 / total.max(1) as f64
}
