use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SliceImage;
use crate::grid::{Grid, Shape, Spacing};

pub const DEFAULT_SPACING_TOLERANCE_MM: f64 = 0.25;
pub const DEFAULT_SINGLE_SLICE_SPACING_MM: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("no slices to assemble")]
    EmptyInput,
    #[error("slices do not form one series: {0}")]
    MixedSeries(String),
    #[error("inter-slice gap {gap} mm deviates from median {median} mm by more than {tolerance} mm")]
    NonUniformSpacing {
        gap: f64,
        median: f64,
        tolerance: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssemblyOptions {
    /// Largest tolerated `|gap - median gap|`.
    pub spacing_tolerance_mm: f64,
    pub single_slice_spacing_mm: f64,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            spacing_tolerance_mm: DEFAULT_SPACING_TOLERANCE_MM,
            single_slice_spacing_mm: DEFAULT_SINGLE_SLICE_SPACING_MM,
        }
    }
}

/// A CT volume in Hounsfield units, axial-aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeImage {
    pub study_uid: String,
    pub series_uid: String,
    pub spacing: Spacing,
    pub origin: [f64; 3],
    pub voxels: Grid<f64>,
}

impl VolumeImage {
    pub fn shape(&self) -> Shape {
        self.voxels.shape()
    }
}

pub fn assemble_volume(slices: Vec<SliceImage>) -> Result<VolumeImage, AssemblyError> {
    assemble_volume_with(slices, &AssemblyOptions::default())
}

/// Sort slices along z, apply the rescale, and stack them.
///
/// Slices sharing a SOP instance UID are deduplicated, the later one in
/// input order replacing the earlier.
pub fn assemble_volume_with(
    slices: Vec<SliceImage>,
    opts: &AssemblyOptions,
) -> Result<VolumeImage, AssemblyError> {
    let mut by_sop: HashMap<String, usize> = HashMap::new();
    let mut unique: Vec<Option<SliceImage>> = Vec::with_capacity(slices.len());
    for s in slices {
        match by_sop.get(&s.sop_uid) {
            Some(&i) => unique[i] = Some(s),
            None => {
                by_sop.insert(s.sop_uid.clone(), unique.len());
                unique.push(Some(s));
            }
        }
    }
    let mut slices: Vec<SliceImage> = unique.into_iter().flatten().collect();
    let first = slices.first().ok_or(AssemblyError::EmptyInput)?;

    for s in &slices[1..] {
        let mismatch = if s.study_uid != first.study_uid {
            Some("study UID")
        } else if s.series_uid != first.series_uid {
            Some("series UID")
        } else if s.rows != first.rows || s.cols != first.cols {
            Some("matrix size")
        } else if s.pixel_spacing != first.pixel_spacing {
            Some("pixel spacing")
        } else {
            None
        };
        if let Some(what) = mismatch {
            return Err(AssemblyError::MixedSeries(format!(
                "{what} differs between {} and {}",
                first.sop_uid, s.sop_uid
            )));
        }
    }

    slices.sort_by(|a, b| {
        a.image_position[2]
            .total_cmp(&b.image_position[2])
            .then_with(|| a.sop_uid.cmp(&b.sop_uid))
    });

    let sz = if slices.len() == 1 {
        opts.single_slice_spacing_mm
    } else {
        let gaps: Vec<f64> = slices
            .windows(2)
            .map(|w| w[1].image_position[2] - w[0].image_position[2])
            .collect();
        let median = median(&mut gaps.clone());
        for &gap in &gaps {
            if (gap - median).abs() > opts.spacing_tolerance_mm {
                return Err(AssemblyError::NonUniformSpacing {
                    gap,
                    median,
                    tolerance: opts.spacing_tolerance_mm,
                });
            }
        }
        if median <= 0.0 {
            return Err(AssemblyError::NonUniformSpacing {
                gap: 0.0,
                median,
                tolerance: opts.spacing_tolerance_mm,
            });
        }
        median
    };

    let first = &slices[0];
    let shape = Shape::new(first.cols as usize, first.rows as usize, slices.len());
    let spacing = Spacing::new(first.pixel_spacing[1], first.pixel_spacing[0], sz);
    let mut voxels = Vec::with_capacity(shape.len());
    for s in &slices {
        voxels.extend(s.pixel_data.iter().map(|&v| s.rescale(v)));
    }
    Ok(VolumeImage {
        study_uid: first.study_uid.clone(),
        series_uid: first.series_uid.clone(),
        spacing,
        origin: first.image_position,
        voxels: Grid::from_vec(shape, voxels)
            .map_err(|e| AssemblyError::MixedSeries(e.to_string()))?,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
