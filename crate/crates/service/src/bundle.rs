//! Viewer payloads: windowed 8-bit slices, probability heatmaps and
//! run-length masks.

use hemoloop_core::grid::{Grid, Mask, ProbMap, Shape, Spacing};
use hemoloop_core::inference::Lesion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Brain window in HU.
pub const DEFAULT_WINDOW: (f64, f64) = (0.0, 80.0);

/// `floor(255 · (hu − lo)/(hi − lo))`, clamped to 0..=255.
pub fn window_u8(hu: f64, lo: f64, hi: f64) -> u8 {
    let t = ((hu - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).floor() as u8
}

/// `floor(255 · p)`, clamped.
pub fn heat_u8(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).floor() as u8
}

/// `(start, len)` runs of set pixels over a row-major slice.
pub type Runs = Vec<(u32, u32)>;

pub fn rle_encode(bits: &[bool]) -> Runs {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        if bits[i] {
            let start = i;
            while i < bits.len() && bits[i] {
                i += 1;
            }
            out.push((start as u32, (i - start) as u32));
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("mask has {got} slices, volume has {expected}")]
    SliceCount { expected: usize, got: usize },
    #[error("slice {slice}: run {start}+{len} leaves the {size}-pixel slice")]
    OutOfBounds { slice: usize, start: u32, len: u32, size: usize },
    #[error("slice {slice}: runs must be ascending, non-empty and disjoint")]
    Unordered { slice: usize },
}

/// Decode per-slice runs onto `shape`. Runs must be non-empty, ascending and
/// non-overlapping so every mask has exactly one encoding.
pub fn rle_decode(shape: Shape, slices: &[Runs]) -> Result<Mask, RleError> {
    if slices.len() != shape.nz {
        return Err(RleError::SliceCount {
            expected: shape.nz,
            got: slices.len(),
        });
    }
    let size = shape.nx * shape.ny;
    let mut mask = Grid::filled(shape, false);
    let data = mask.as_mut_slice();
    for (z, runs) in slices.iter().enumerate() {
        let mut next_free = 0u64;
        for &(start, len) in runs {
            if len == 0 || (start as u64) < next_free {
                return Err(RleError::Unordered { slice: z });
            }
            let end = start as u64 + len as u64;
            if end > size as u64 {
                return Err(RleError::OutOfBounds { slice: z, start, len, size });
            }
            let base = z * size;
            data[base + start as usize..base + end as usize].fill(true);
            next_free = end + 1;
        }
    }
    Ok(mask)
}

pub fn mask_to_rle(mask: &Mask) -> Vec<Runs> {
    (0..mask.shape().nz).map(|z| rle_encode(mask.slice_z(z))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseBundle {
    pub case_id: u64,
    pub study_uid: String,
    pub series_uid: String,
    pub result_id: u64,
    pub model_versions: Vec<u64>,
    pub shape: Shape,
    pub spacing: Spacing,
    pub window: (f64, f64),
    /// One row-major `nx·ny` raster per slice.
    pub slices: Vec<Vec<u8>>,
    pub heatmap: Vec<Vec<u8>>,
    pub mask_rle: Vec<Runs>,
    pub lesions: Vec<Lesion>,
    pub case_score: f64,
    pub predicted_positive: bool,
    pub total_volume_ml: f64,
}

/// Raster the volume and maps; all three grids share `shape`.
pub fn rasters(volume: &Grid<f64>, prob: &ProbMap, mask: &Mask, window: (f64, f64)) -> (Vec<Vec<u8>>, Vec<Vec<u8>>, Vec<Runs>) {
    let nz = volume.shape().nz;
    let slices = (0..nz)
        .map(|z| volume.slice_z(z).iter().map(|&h| window_u8(h, window.0, window.1)).collect())
        .collect();
    let heat = (0..nz).map(|z| prob.slice_z(z).iter().map(|&p| heat_u8(p)).collect()).collect();
    (slices, heat, mask_to_rle(mask))
}
