//! Prediction pipeline: per-model (optionally flip-augmented) prediction,
//! ensemble combination, thresholding with component filtering, lesion
//! confidences and the case-level score.

mod components;

use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use components::{binarize_and_filter, label_components, Component, Segmentation};

use crate::dicom::VolumeImage;
use crate::grid::{Grid, Mask, ProbMap};
use crate::metrics::CalibrationMap;
use crate::model::{in_tissue_window, ModelError, ProbabilityModel};
use crate::registry::{Registry, RegistryError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_COMPONENT_MM3: f64 = 20.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
    #[error("bad ensemble weights: {0}")]
    BadWeights(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty component")]
    EmptyComponent,
    #[error("no probability maps to combine")]
    NoMaps,
    #[error("case {0} is not ready for inference")]
    NotReady(u64),
    #[error("no model is deployed")]
    NoDeployedModel,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Registry(Box<RegistryError>),
}

impl From<RegistryError> for InferenceError {
    fn from(e: RegistryError) -> Self {
        InferenceError::Registry(Box::new(e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    Off,
    #[default]
    Flips,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleStrategy {
    #[default]
    Single,
    Average,
    MajorityVote,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub tta: TtaMode,
    pub ensemble: EnsembleStrategy,
    pub ensemble_weights: Option<Vec<f64>>,
    pub threshold: f64,
    pub min_component_volume_mm3: f64,
    /// Members of the ensemble. Empty means "the model this config belongs
    /// to" (or the deployed model when run ad hoc).
    pub model_ids: Vec<u64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tta: TtaMode::Flips,
            ensemble: EnsembleStrategy::Single,
            ensemble_weights: None,
            threshold: DEFAULT_THRESHOLD,
            min_component_volume_mm3: DEFAULT_MIN_COMPONENT_MM3,
            model_ids: Vec::new(),
        }
    }
}

impl InferenceConfig {
    /// Check the config against the number of ensemble members it will run with.
    pub fn validate(&self, model_count: usize) -> Result<(), InferenceError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(InferenceError::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(self.min_component_volume_mm3 >= 0.0 && self.min_component_volume_mm3.is_finite()) {
            return Err(InferenceError::InvalidConfig(
                "min_component_volume_mm3 must be finite and >= 0".into(),
            ));
        }
        if model_count == 0 {
            return Err(InferenceError::InvalidConfig("no models".into()));
        }
        if self.ensemble == EnsembleStrategy::Single && model_count != 1 {
            return Err(InferenceError::InvalidConfig(format!(
                "strategy single with {model_count} models"
            )));
        }
        if let Some(w) = &self.ensemble_weights {
            check_weights(w, model_count)?;
        } else if self.ensemble == EnsembleStrategy::Weighted {
            return Err(InferenceError::BadWeights("weighted ensemble needs weights".into()));
        }
        Ok(())
    }
}

fn check_weights(w: &[f64], n: usize) -> Result<(), InferenceError> {
    if w.len() != n {
        return Err(InferenceError::BadWeights(format!("{} weights for {n} models", w.len())));
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(InferenceError::BadWeights("weights must be finite and non-negative".into()));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(InferenceError::BadWeights("weights sum to zero".into()));
    }
    Ok(())
}

fn check_map(map: &ProbMap, volume: &VolumeImage) -> Result<(), InferenceError> {
    if map.shape() != volume.shape() {
        return Err(InferenceError::ShapeMismatch(format!(
            "model returned {}, volume is {}",
            map.shape(),
            volume.shape()
        )));
    }
    Ok(())
}

fn with_voxels(volume: &VolumeImage, voxels: Grid<f64>) -> VolumeImage {
    VolumeImage {
        study_uid: volume.study_uid.clone(),
        series_uid: volume.series_uid.clone(),
        spacing: volume.spacing,
        origin: volume.origin,
        voxels,
    }
}

/// Mean prediction over {identity, flip-x, flip-y, flip-x∘flip-y}, each
/// prediction mapped back to the original orientation first.
pub fn apply_tta(model: &dyn ProbabilityModel, volume: &VolumeImage) -> Result<ProbMap, InferenceError> {
    let flip = |g: &Grid<f64>, k: usize| -> Grid<f64> {
        match k {
            0 => g.clone(),
            1 => g.flip_x(),
            2 => g.flip_y(),
            _ => g.flip_x().flip_y(),
        }
    };
    let maps: Vec<Result<ProbMap, InferenceError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|k| {
                s.spawn(move || {
                    let v = if k == 0 {
                        volume.clone()
                    } else {
                        with_voxels(volume, flip(&volume.voxels, k))
                    };
                    let p = model.predict(&v)?;
                    check_map(&p, volume)?;
                    Ok(flip(&p, k))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("tta worker panicked")).collect()
    });
    let maps = maps.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut out = maps[0].clone();
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        *o = (maps[0].as_slice()[i] + maps[1].as_slice()[i] + maps[2].as_slice()[i] + maps[3].as_slice()[i]) / 4.0;
    }
    Ok(out)
}

/// Combine member maps voxel-wise.
///
/// `average` is the arithmetic mean, `weighted` is `Σwᵢmᵢ / Σwᵢ` (equal
/// weights take the `average` path), `majority_vote` is the fraction of
/// members with `p >= threshold`, and `single` passes one map through.
pub fn ensemble_combine(
    maps: &[ProbMap],
    strategy: EnsembleStrategy,
    weights: Option<&[f64]>,
    threshold: f64,
) -> Result<ProbMap, InferenceError> {
    let first = maps.first().ok_or(InferenceError::NoMaps)?;
    if let Some(bad) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(InferenceError::ShapeMismatch(format!(
            "ensemble members {} and {}",
            first.shape(),
            bad.shape()
        )));
    }
    let n = maps.len() as f64;
    let mut out = first.clone();
    let voxels = out.as_mut_slice();
    match strategy {
        EnsembleStrategy::Single => {
            if maps.len() != 1 {
                return Err(InferenceError::InvalidConfig(format!("strategy single with {} maps", maps.len())));
            }
        }
        EnsembleStrategy::Average => average_into(voxels, maps, n),
        EnsembleStrategy::MajorityVote => {
            for (i, o) in voxels.iter_mut().enumerate() {
                let votes = maps.iter().filter(|m| m.as_slice()[i] >= threshold).count();
                *o = votes as f64 / n;
            }
        }
        EnsembleStrategy::Weighted => {
            let w = weights.ok_or_else(|| InferenceError::BadWeights("weighted ensemble needs weights".into()))?;
            check_weights(w, maps.len())?;
            if w.iter().all(|&x| x == w[0]) {
                average_into(voxels, maps, n);
            } else {
                let total: f64 = w.iter().sum();
                for (i, o) in voxels.iter_mut().enumerate() {
                    *o = maps.iter().zip(w).map(|(m, &wk)| wk * m.as_slice()[i]).sum::<f64>() / total;
                }
            }
        }
    }
    Ok(out)
}

fn average_into(out: &mut [f64], maps: &[ProbMap], n: f64) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = maps.iter().map(|m| m.as_slice()[i]).sum::<f64>() / n;
    }
}

/// Mean probability over the component, passed through `calibration`.
pub fn lesion_confidence(map: &ProbMap, component: &Component, calibration: &CalibrationMap) -> Result<f64, InferenceError> {
    if component.is_empty() {
        return Err(InferenceError::EmptyComponent);
    }
    let p = map.as_slice();
    let mean = component.voxels.iter().map(|&i| p[i]).sum::<f64>() / component.len() as f64;
    Ok(calibration.apply(mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub component_id: usize,
    pub voxel_count: usize,
    pub volume_ml: f64,
    pub confidence: f64,
}

/// In-memory pipeline output for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub prob_map: ProbMap,
    pub mask: Mask,
    pub lesions: Vec<Lesion>,
    pub case_score: f64,
    pub total_volume_ml: f64,
    pub wall_time_ms: f64,
}

impl PipelineOutput {
    pub fn is_positive(&self) -> bool {
        !self.lesions.is_empty()
    }
}

/// Per-model prediction (with TTA if configured), ensemble, soft-tissue
/// gating, threshold and filter, lesion confidences, case score.
///
/// The case score is the highest lesion confidence. With no surviving
/// lesion it is the highest voxel probability scaled by the threshold, so
/// an undetected case never outranks a detected one while negatives keep a
/// usable ordering. Both go through `calibration` to stay on one scale.
pub fn run_pipeline(
    volume: &VolumeImage,
    models: &[&dyn ProbabilityModel],
    config: &InferenceConfig,
    calibration: &CalibrationMap,
) -> Result<PipelineOutput, InferenceError> {
    let started = Instant::now();
    config.validate(models.len())?;
    let mut maps = Vec::with_capacity(models.len());
    for model in models {
        let map = match config.tta {
            TtaMode::Flips => apply_tta(*model, volume)?,
            TtaMode::Off => {
                let p = model.predict(volume)?;
                check_map(&p, volume)?;
                p
            }
        };
        maps.push(map);
    }
    let mut prob_map = ensemble_combine(&maps, config.ensemble, config.ensemble_weights.as_deref(), config.threshold)?;
    for (p, &hu) in prob_map.as_mut_slice().iter_mut().zip(volume.voxels.as_slice()) {
        if !in_tissue_window(hu) {
            *p = 0.0;
        }
    }
    let seg = binarize_and_filter(&prob_map, config.threshold, config.min_component_volume_mm3, volume.spacing);
    let lesions = seg
        .components
        .iter()
        .map(|c| {
            Ok(Lesion {
                component_id: c.id,
                voxel_count: c.len(),
                volume_ml: volume.spacing.volume_ml(c.len()),
                confidence: lesion_confidence(&prob_map, c, calibration)?,
            })
        })
        .collect::<Result<Vec<_>, InferenceError>>()?;
    let case_score = if lesions.is_empty() {
        let hottest = prob_map.as_slice().iter().copied().fold(0.0, f64::max);
        calibration.apply(config.threshold * hottest)
    } else {
        lesions.iter().map(|l| l.confidence).fold(0.0, f64::max)
    };
    let total_volume_ml = volume.spacing.volume_ml(seg.mask.count());
    Ok(PipelineOutput {
        prob_map,
        mask: seg.mask,
        lesions,
        case_score,
        total_volume_ml,
        wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Persisted metadata of one inference run. Maps live in the registry's
/// mask store under `prob_map_ref` and `mask_ref`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub result_id: u64,
    pub case_id: u64,
    pub series_uid: String,
    pub volume_digest: String,
    pub model_versions: Vec<u64>,
    pub config: InferenceConfig,
    pub prob_map_ref: String,
    pub mask_ref: String,
    pub lesions: Vec<Lesion>,
    pub case_score: f64,
    pub total_volume_ml: f64,
    pub wall_time_ms: f64,
    pub created_at: DateTime<Utc>,
}

impl InferenceResult {
    /// A result is positive iff at least one lesion survived filtering.
    pub fn is_positive(&self) -> bool {
        !self.lesions.is_empty()
    }
}

/// A result together with its maps.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub result: InferenceResult,
    pub prob_map: ProbMap,
    pub mask: Mask,
}

/// Run the pipeline on a registered case and persist the result.
///
/// With `config = None` the deployed model's stored config is used. An
/// identical earlier run (same case, members, volume digest and config) is
/// returned instead of recomputed.
pub fn infer_case(registry: &Registry, case_id: u64, config: Option<&InferenceConfig>) -> Result<InferenceOutput, InferenceError> {
    let case = registry.case(case_id).ok_or(InferenceError::NotReady(case_id))?;
    let deployed = registry.deployed_model();
    let mut config = match (config, &deployed) {
        (Some(c), _) => c.clone(),
        (None, Some(d)) => d.inference.clone(),
        (None, None) => return Err(InferenceError::NoDeployedModel),
    };
    if config.model_ids.is_empty() {
        let d = deployed.ok_or(InferenceError::NoDeployedModel)?;
        config.model_ids = vec![d.version_id];
    }
    if let Some(existing) = registry.find_result(case_id, &config, &case.volume_digest) {
        let (prob_map, mask) = registry.load_result_maps(&existing)?;
        return Ok(InferenceOutput {
            result: existing,
            prob_map,
            mask,
        });
    }
    let volume = registry.load_volume(&case)?;
    let mut artifacts = Vec::with_capacity(config.model_ids.len());
    for &id in &config.model_ids {
        artifacts.push(registry.load_artifact(id)?);
    }
    let calibration = registry
        .model(config.model_ids[0])
        .and_then(|m| m.calibration.map(|c| c.map))
        .unwrap_or_default();
    let models: Vec<&dyn ProbabilityModel> = artifacts.iter().map(|a| a as &dyn ProbabilityModel).collect();
    let out = run_pipeline(&volume, &models, &config, &calibration)?;
    Ok(registry.record_result(&case, &volume, config, out)?)
}
