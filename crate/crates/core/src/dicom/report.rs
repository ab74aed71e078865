use thiserror::Error;

use super::VolumeImage;
use crate::grid::{GridError, Mask};
use crate::inference::InferenceOutput;

/// Disclaimer stamped on every derived series ("not approved for clinical use").
pub const DEFAULT_DISCLAIMER: &str = "ikke godkjent for klinisk bruk";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    PositiveMaskOverlay,
    NegativeMarker,
}

/// Derived series pushed back to the archive after inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSeries {
    pub kind: ReportKind,
    /// Series instance UID of the source volume.
    pub derived_from: String,
    pub overlay_mask: Option<Mask>,
    pub lesion_volume_ml: Option<f64>,
    pub disclaimer_text: String,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("mask grid does not match volume: {0}")]
    ShapeMismatch(#[from] GridError),
    #[error("result belongs to series {result}, source is {source_series}")]
    SeriesMismatch {
        result: String,
        source_series: String,
    },
}

pub fn render_report(
    output: &InferenceOutput,
    source: &VolumeImage,
    disclaimer: &str,
) -> Result<ReportSeries, ReportError> {
    if output.result.series_uid != source.series_uid {
        return Err(ReportError::SeriesMismatch {
            result: output.result.series_uid.clone(),
            source_series: source.series_uid.clone(),
        });
    }
    output.mask.ensure_shape(source.shape())?;
    let disclaimer_text = if disclaimer.trim().is_empty() {
        DEFAULT_DISCLAIMER.to_string()
    } else {
        disclaimer.to_string()
    };
    let positive = output.result.is_positive() && output.mask.count() > 0;
    Ok(if positive {
        ReportSeries {
            kind: ReportKind::PositiveMaskOverlay,
            derived_from: source.series_uid.clone(),
            overlay_mask: Some(output.mask.clone()),
            lesion_volume_ml: Some(source.spacing.volume_ml(output.mask.count())),
            disclaimer_text,
        }
    } else {
        ReportSeries {
            kind: ReportKind::NegativeMarker,
            derived_from: source.series_uid.clone(),
            overlay_mask: None,
            lesion_volume_ml: None,
            disclaimer_text,
        }
    })
}
