//! Dense 3D grids and the raw header+payload file format shared by stored
//! volumes, probability maps, masks and the external-runner contract.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`. For axial CT
//! `x` runs along columns and `y` along rows of each slice.
//!
//! Raw file layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "HLRV"
//!      4     1  version (1)
//!      5     1  dtype: 1 = f32, 2 = u8, 3 = f64
//!      6     2  reserved, zero
//!      8    12  nx, ny, nz as u32
//!     20    24  sx, sy, sz as f64 (mm)
//!     44     -  nx*ny*nz elements of dtype
//! ```

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RAW_MAGIC: &[u8; 4] = b"HLRV";
pub const RAW_VERSION: u8 = 1;
pub const RAW_HEADER_LEN: usize = 44;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("not a raw volume file (bad magic)")]
    BadMagic,
    #[error("unsupported raw version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported raw dtype {0}")]
    UnsupportedDtype(u8),
    #[error("raw payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Shape {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.nx;
        let rest = index / self.nx;
        (x, rest % self.ny, rest / self.ny)
    }

    pub const fn slice_len(&self) -> usize {
        self.nx * self.ny
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Voxel spacing in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub const fn new(sx: f64, sy: f64, sz: f64) -> Self {
        Self { sx, sy, sz }
    }

    pub fn is_valid(&self) -> bool {
        [self.sx, self.sy, self.sz]
            .iter()
            .all(|s| s.is_finite() && *s > 0.0)
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.sx * self.sy * self.sz
    }

    /// Volume of `count` voxels in millilitres.
    pub fn volume_ml(&self, count: usize) -> f64 {
        count as f64 * self.voxel_volume_mm3() / 1000.0
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    shape: Shape,
    data: Vec<T>,
}

/// Per-voxel probabilities in `[0, 1]`.
pub type ProbMap = Grid<f64>;
/// Binary segmentation mask.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, GridError> {
        if data.len() != shape.len() {
            return Err(GridError::ShapeMismatch {
                expected: format!("{shape} ({} voxels)", shape.len()),
                actual: format!("{} voxels", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz {
            for y in 0..shape.ny {
                for x in 0..shape.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.shape.index(x, y, z)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize, z: usize) -> &mut T {
        let i = self.shape.index(x, y, z);
        &mut self.data[i]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Borrow the z-th axial slice as a row-major `ny x nx` block.
    pub fn slice_z(&self, z: usize) -> &[T] {
        let n = self.shape.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<(), GridError> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(GridError::ShapeMismatch {
                expected: expected.to_string(),
                actual: self.shape.to_string(),
            })
        }
    }
}

impl<T: Clone> Grid<T> {
    /// Mirror along x. Involutive.
    pub fn flip_x(&self) -> Self {
        let s = self.shape;
        Self::from_fn(s, |x, y, z| self.get(s.nx - 1 - x, y, z).clone())
    }

    /// Mirror along y. Involutive.
    pub fn flip_y(&self) -> Self {
        let s = self.shape;
        Self::from_fn(s, |x, y, z| self.get(x, s.ny - 1 - y, z).clone())
    }
}

impl Mask {
    pub fn empty(shape: Shape) -> Self {
        Self::filled(shape, false)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }
}

/// Payload of a raw file.
#[derive(Clone, Debug, PartialEq)]
pub enum RawData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl RawData {
    fn dtype(&self) -> u8 {
        match self {
            RawData::F32(_) => 1,
            RawData::U8(_) => 2,
            RawData::F64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            RawData::F32(v) => v.len(),
            RawData::U8(v) => v.len(),
            RawData::F64(v) => v.len(),
        }
    }

    /// Widen any payload to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            RawData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RawData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            RawData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawFile {
    pub shape: Shape,
    pub spacing: Spacing,
    pub data: RawData,
}

impl RawFile {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        if self.data.len() != self.shape.len() {
            return Err(GridError::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: format!("{} elements", self.data.len()),
            });
        }
        let mut header = Vec::with_capacity(RAW_HEADER_LEN);
        header.extend_from_slice(RAW_MAGIC);
        header.push(RAW_VERSION);
        header.push(self.data.dtype());
        header.extend_from_slice(&0u16.to_le_bytes());
        for n in [self.shape.nx, self.shape.ny, self.shape.nz] {
            header.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for s in [self.spacing.sx, self.spacing.sy, self.spacing.sz] {
            header.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&header)?;
        let payload: Vec<u8> = match &self.data {
            RawData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            RawData::U8(v) => v.clone(),
            RawData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        };
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, GridError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, GridError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        if bytes.len() < RAW_HEADER_LEN {
            return Err(if bytes.len() >= 4 && &bytes[..4] != RAW_MAGIC {
                GridError::BadMagic
            } else {
                GridError::Truncated {
                    expected: RAW_HEADER_LEN,
                    found: bytes.len(),
                }
            });
        }
        if &bytes[..4] != RAW_MAGIC {
            return Err(GridError::BadMagic);
        }
        if bytes[4] != RAW_VERSION {
            return Err(GridError::UnsupportedVersion(bytes[4]));
        }
        let dtype = bytes[5];
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let shape = Shape::new(u32_at(8), u32_at(12), u32_at(16));
        let spacing = Spacing::new(f64_at(20), f64_at(28), f64_at(36));
        if !spacing.is_valid() {
            return Err(GridError::InvalidSpacing([spacing.sx, spacing.sy, spacing.sz]));
        }
        let width = match dtype {
            1 => 4,
            2 => 1,
            3 => 8,
            other => return Err(GridError::UnsupportedDtype(other)),
        };
        let payload = &bytes[RAW_HEADER_LEN..];
        let expected = shape.len() * width;
        if payload.len() != expected {
            return Err(GridError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let data = match dtype {
            1 => RawData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => RawData::U8(payload.to_vec()),
            _ => RawData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn from_prob_map(map: &ProbMap, spacing: Spacing) -> Self {
        Self {
            shape: map.shape(),
            spacing,
            data: RawData::F32(map.as_slice().iter().map(|&p| p as f32).collect()),
        }
    }

    pub fn from_mask(mask: &Mask, spacing: Spacing) -> Self {
        Self {
            shape: mask.shape(),
            spacing,
            data: RawData::U8(mask.to_bytes()),
        }
    }

    pub fn into_prob_map(self) -> Result<ProbMap, GridError> {
        Grid::from_vec(self.shape, self.data.to_f64())
    }

    pub fn into_mask(self) -> Result<Mask, GridError> {
        let bits = match self.data {
            RawData::U8(v) => v.into_iter().map(|b| b != 0).collect(),
            other => other.to_f64().into_iter().map(|v| v != 0.0).collect(),
        };
        Grid::from_vec(self.shape, bits)
    }
}
