//! Core library for the hemorrhage-detection deployment loop.
//!
//! The pieces, bottom up:
//!
//! * [`grid`]: dense 3-D grids and the raw header+payload file format.
//! * [`dicom`]: the constrained DICOM-style slice codec, volume assembly and
//!   report series.
//! * [`model`]: handcrafted voxel features, the logistic reference classifier
//!   and the external-runner process contract.
//! * [`inference`]: TTA, ensembling, thresholding, connected components,
//!   lesion confidences and case scores.
//! * [`metrics`]: confusion metrics, Dice, ROC/AUC, Youden calibration with
//!   an isotonic confidence map, CSV and SVG export.
//! * [`registry`]: the event-sourced store of cases, partitions, models,
//!   annotations and results.
//! * [`refinement`]: training rounds, model selection, online replay and the
//!   synthetic three-round campaign.
//! * [`phantom`]: seeded synthetic head CT volumes.

pub mod dicom;
pub mod grid;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod refinement;
pub mod registry;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/volumes.md")]
    pub mod volumes {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/inference.md")]
    pub mod inference {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/registry.md")]
    pub mod registry {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    pub mod refinement {}
}
