//! Constrained DICOM subset: single-frame, uncompressed, explicit-VR
//! little-endian CT slices, their assembly into volumes, and derived
//! report series.

mod codec;
mod report;
mod volume;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codec::{parse_slice, pixel_data_offset, write_slice, EXPLICIT_VR_LE, MAGIC, PREAMBLE_LEN};
pub use report::{render_report, ReportError, ReportKind, ReportSeries, DEFAULT_DISCLAIMER};
pub use volume::{
    assemble_volume, assemble_volume_with, AssemblyError, AssemblyOptions, VolumeImage,
    DEFAULT_SINGLE_SLICE_SPACING_MM, DEFAULT_SPACING_TOLERANCE_MM,
};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag {
    pub group: u16,
    pub element: u16,
}

impl Tag {
    pub const fn new(group: u16, element: u16) -> Self {
        Self { group, element }
    }

    pub const META_GROUP_LENGTH: Tag = Tag::new(0x0002, 0x0000);
    pub const TRANSFER_SYNTAX: Tag = Tag::new(0x0002, 0x0010);
    pub const SOP_UID: Tag = Tag::new(0x0008, 0x0018);
    pub const STUDY_UID: Tag = Tag::new(0x0020, 0x000D);
    pub const SERIES_UID: Tag = Tag::new(0x0020, 0x000E);
    pub const IMAGE_POSITION: Tag = Tag::new(0x0020, 0x0032);
    pub const SLICE_LOCATION: Tag = Tag::new(0x0020, 0x1041);
    pub const ROWS: Tag = Tag::new(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag::new(0x0028, 0x0011);
    pub const PIXEL_SPACING: Tag = Tag::new(0x0028, 0x0030);
    pub const BITS_STORED: Tag = Tag::new(0x0028, 0x0101);
    pub const RESCALE_INTERCEPT: Tag = Tag::new(0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = Tag::new(0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = Tag::new(0x7FE0, 0x0010);

    pub fn name(&self) -> Option<&'static str> {
        Some(match *self {
            Tag::META_GROUP_LENGTH => "FileMetaInformationGroupLength",
            Tag::TRANSFER_SYNTAX => "TransferSyntaxUID",
            Tag::SOP_UID => "SOPInstanceUID",
            Tag::STUDY_UID => "StudyInstanceUID",
            Tag::SERIES_UID => "SeriesInstanceUID",
            Tag::IMAGE_POSITION => "ImagePositionPatient",
            Tag::SLICE_LOCATION => "SliceLocation",
            Tag::ROWS => "Rows",
            Tag::COLUMNS => "Columns",
            Tag::PIXEL_SPACING => "PixelSpacing",
            Tag::BITS_STORED => "BitsStored",
            Tag::RESCALE_INTERCEPT => "RescaleIntercept",
            Tag::RESCALE_SLOPE => "RescaleSlope",
            Tag::PIXEL_DATA => "PixelData",
            _ => return None,
        })
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.group, self.element)?;
        if let Some(name) = self.name() {
            write!(f, " {name}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DicomError {
    #[error("missing 128-byte preamble and DICM magic")]
    MissingMagic,
    #[error("missing mandatory tag {0}")]
    MissingTag(Tag),
    #[error("unsupported transfer syntax: {0}")]
    UnsupportedTransferSyntax(String),
    #[error("pixel data holds {found:?} values, expected rows*cols = {expected}")]
    PixelCountMismatch {
        expected: usize,
        found: Option<usize>,
    },
    #[error("invalid value for {tag}: {reason}")]
    InvalidValue { tag: Tag, reason: String },
}

/// One axial CT slice as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub study_uid: String,
    pub series_uid: String,
    pub sop_uid: String,
    pub rows: u16,
    pub cols: u16,
    /// (row spacing, column spacing) in mm.
    pub pixel_spacing: [f64; 2],
    pub slice_location: f64,
    pub image_position: [f64; 3],
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub bits_stored: u16,
    /// Row-major stored values.
    pub pixel_data: Vec<i16>,
}

/// Non-empty, at most 64 chars, dot-separated runs of decimal digits.
pub fn is_valid_uid(uid: &str) -> bool {
    !uid.is_empty()
        && uid.len() <= 64
        && uid
            .split('.')
            .all(|c| !c.is_empty() && c.bytes().all(|b| b.is_ascii_digit()))
}

impl SliceImage {
    pub fn validate(&self) -> Result<(), DicomError> {
        for (tag, uid) in [
            (Tag::STUDY_UID, &self.study_uid),
            (Tag::SERIES_UID, &self.series_uid),
            (Tag::SOP_UID, &self.sop_uid),
        ] {
            if !is_valid_uid(uid) {
                return Err(DicomError::InvalidValue {
                    tag,
                    reason: format!("malformed UID {uid:?}"),
                });
            }
        }
        if self.bits_stored != 16 {
            return Err(DicomError::InvalidValue {
                tag: Tag::BITS_STORED,
                reason: format!("bits stored must be 16, found {}", self.bits_stored),
            });
        }
        if !self.pixel_spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(DicomError::InvalidValue {
                tag: Tag::PIXEL_SPACING,
                reason: format!("spacing must be positive, found {:?}", self.pixel_spacing),
            });
        }
        let finite = [self.slice_location, self.rescale_slope, self.rescale_intercept]
            .iter()
            .chain(self.image_position.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(DicomError::InvalidValue {
                tag: Tag::IMAGE_POSITION,
                reason: "geometry and rescale values must be finite".into(),
            });
        }
        let expected = self.rows as usize * self.cols as usize;
        if self.pixel_data.len() != expected {
            return Err(DicomError::PixelCountMismatch {
                expected,
                found: Some(self.pixel_data.len()),
            });
        }
        Ok(())
    }

    /// Stored value to Hounsfield units.
    #[inline]
    pub fn rescale(&self, stored: i16) -> f64 {
        self.rescale_slope * stored as f64 + self.rescale_intercept
    }
}

#[cfg(test)]
mod tests;
