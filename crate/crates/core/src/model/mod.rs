//! Trainable reference classifier and the external-runner seam.

pub mod features;
mod logistic;
mod runner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{
    extract_features, in_tissue_window, FeatureGrid, VoxelFeatures, FEATURE_COUNT, FEATURE_NAMES, SHELL_HU,
    TISSUE_WINDOW_HU,
};
pub use logistic::{
    loss_and_gradient, sigmoid, train, voxel_accuracy, ClassifierParams, TrainConfig,
    TrainingMetadata, MAX_POSITIVE_WEIGHT,
};
pub use runner::{run_external, volume_to_runner_file, RunnerDescriptor, DEFAULT_RUNNER_TIMEOUT_SECS};

use crate::dicom::VolumeImage;
use crate::grid::{GridError, ProbMap};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training corpus contains no positive voxels")]
    NoPositiveVoxels,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("runner failed (exit {code:?}): {stderr}")]
    RunnerCrash { code: Option<i32>, stderr: String },
    #[error("runner exceeded {0} s timeout")]
    RunnerTimeout(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<GridError> for ModelError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Io(io) => ModelError::Io(io),
            other => ModelError::ShapeMismatch(other.to_string()),
        }
    }
}

/// Anything that maps a volume to per-voxel bleed probabilities.
pub trait ProbabilityModel: Send + Sync {
    fn predict(&self, volume: &VolumeImage) -> Result<ProbMap, ModelError>;
}

impl ProbabilityModel for ClassifierParams {
    fn predict(&self, volume: &VolumeImage) -> Result<ProbMap, ModelError> {
        self.validate()?;
        Ok(ClassifierParams::predict(self, volume))
    }
}

impl ProbabilityModel for RunnerDescriptor {
    fn predict(&self, volume: &VolumeImage) -> Result<ProbMap, ModelError> {
        run_external(self, volume)
    }
}

/// A registered model artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArtifact {
    ReferenceClassifier { params: ClassifierParams },
    ExternalRunner { runner: RunnerDescriptor },
}

impl ProbabilityModel for ModelArtifact {
    fn predict(&self, volume: &VolumeImage) -> Result<ProbMap, ModelError> {
        match self {
            ModelArtifact::ReferenceClassifier { params } => ProbabilityModel::predict(params, volume),
            ModelArtifact::ExternalRunner { runner } => runner.predict(volume),
        }
    }
}
