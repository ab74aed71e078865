//! Explicit-VR little-endian element codec for single-frame slice files.
//!
//! File layout: 128 zero bytes, `DICM`, then data elements in ascending tag
//! order. The writer emits a minimal file-meta group (group length and
//! transfer syntax) followed by the mandatory image tags.

use super::{DicomError, SliceImage, Tag};

pub const PREAMBLE_LEN: usize = 128;
pub const MAGIC: &[u8; 4] = b"DICM";
/// Explicit VR Little Endian.
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Vr {
    Ui,
    Ds,
    Us,
    Ul,
    Ow,
    Other([u8; 2]),
}

impl Vr {
    fn from_bytes(b: [u8; 2]) -> Option<Self> {
        if !(b[0].is_ascii_uppercase() && b[1].is_ascii_uppercase()) {
            return None;
        }
        Some(match &b {
            b"UI" => Vr::Ui,
            b"DS" => Vr::Ds,
            b"US" => Vr::Us,
            b"UL" => Vr::Ul,
            b"OW" => Vr::Ow,
            _ => Vr::Other(b),
        })
    }

    fn code(self) -> [u8; 2] {
        match self {
            Vr::Ui => *b"UI",
            Vr::Ds => *b"DS",
            Vr::Us => *b"US",
            Vr::Ul => *b"UL",
            Vr::Ow => *b"OW",
            Vr::Other(b) => b,
        }
    }

    /// VRs with a 2-byte reserved field and a 32-bit length.
    fn has_long_length(self) -> bool {
        matches!(
            &self.code(),
            b"OB" | b"OD" | b"OF" | b"OL" | b"OW" | b"OV" | b"SQ" | b"UC" | b"UN" | b"UR" | b"UT"
        )
    }
}

struct Element<'a> {
    tag: Tag,
    vr: Vr,
    value: &'a [u8],
}

enum Next<'a> {
    Element(Element<'a>),
    /// Header of this tag was read but its value runs past the end.
    TruncatedValue(Tag),
    End,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Result<Next<'a>, DicomError> {
        let b = self.bytes;
        let p = self.pos;
        if p + 8 > b.len() {
            return Ok(Next::End);
        }
        let tag = Tag::new(
            u16::from_le_bytes([b[p], b[p + 1]]),
            u16::from_le_bytes([b[p + 2], b[p + 3]]),
        );
        let vr = Vr::from_bytes([b[p + 4], b[p + 5]])
            .ok_or(DicomError::UnsupportedTransferSyntax(
                "element without explicit VR".into(),
            ))?;
        let (len, header) = if vr.has_long_length() {
            if p + 12 > b.len() {
                return Ok(Next::End);
            }
            (
                u32::from_le_bytes([b[p + 8], b[p + 9], b[p + 10], b[p + 11]]) as usize,
                12,
            )
        } else {
            (u16::from_le_bytes([b[p + 6], b[p + 7]]) as usize, 8)
        };
        if len == 0xFFFF_FFFF {
            return Err(DicomError::UnsupportedTransferSyntax(format!(
                "undefined length on {tag}"
            )));
        }
        let start = p + header;
        let end = start.saturating_add(len);
        if end > b.len() {
            self.pos = b.len();
            return Ok(Next::TruncatedValue(tag));
        }
        self.pos = end;
        Ok(Next::Element(Element {
            tag,
            vr,
            value: &b[start..end],
        }))
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_end_matches(['\0', ' '])
        .trim_start_matches(' ')
        .to_string()
}

fn decimals(tag: Tag, value: &[u8]) -> Result<Vec<f64>, DicomError> {
    text(value)
        .split('\\')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| DicomError::InvalidValue {
                tag,
                reason: format!("not a decimal string: {s:?}"),
            })
        })
        .collect()
}

fn decimal_n<const N: usize>(tag: Tag, value: &[u8]) -> Result<[f64; N], DicomError> {
    let v = decimals(tag, value)?;
    v.try_into().map_err(|v: Vec<f64>| DicomError::InvalidValue {
        tag,
        reason: format!("expected {N} values, found {}", v.len()),
    })
}

fn ushort(tag: Tag, value: &[u8]) -> Result<u16, DicomError> {
    match value {
        [a, b] => Ok(u16::from_le_bytes([*a, *b])),
        _ => Err(DicomError::InvalidValue {
            tag,
            reason: format!("US value of {} bytes", value.len()),
        }),
    }
}

#[derive(Default)]
struct Collected {
    study_uid: Option<String>,
    series_uid: Option<String>,
    sop_uid: Option<String>,
    rows: Option<u16>,
    cols: Option<u16>,
    pixel_spacing: Option<[f64; 2]>,
    slice_location: Option<f64>,
    image_position: Option<[f64; 3]>,
    rescale_slope: Option<f64>,
    rescale_intercept: Option<f64>,
    bits_stored: Option<u16>,
    pixel_bytes: Option<Result<Vec<u8>, ()>>,
}

/// Parse one slice file. Pixel values are returned as stored (no rescale).
pub fn parse_slice(bytes: &[u8]) -> Result<SliceImage, DicomError> {
    if bytes.len() < PREAMBLE_LEN + 4 || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(DicomError::MissingMagic);
    }
    let mut reader = Reader {
        bytes,
        pos: PREAMBLE_LEN + 4,
    };
    let mut c = Collected::default();
    loop {
        let el = match reader.next()? {
            Next::End => break,
            Next::TruncatedValue(tag) => {
                if tag == Tag::PIXEL_DATA {
                    c.pixel_bytes = Some(Err(()));
                }
                break;
            }
            Next::Element(el) => el,
        };
        let tag = el.tag;
        let v = el.value;
        match tag {
            Tag::TRANSFER_SYNTAX => {
                let ts = text(v);
                if ts != EXPLICIT_VR_LE {
                    return Err(DicomError::UnsupportedTransferSyntax(ts));
                }
            }
            Tag::STUDY_UID => c.study_uid = Some(text(v)),
            Tag::SERIES_UID => c.series_uid = Some(text(v)),
            Tag::SOP_UID => c.sop_uid = Some(text(v)),
            Tag::ROWS => c.rows = Some(ushort(tag, v)?),
            Tag::COLUMNS => c.cols = Some(ushort(tag, v)?),
            Tag::BITS_STORED => c.bits_stored = Some(ushort(tag, v)?),
            Tag::PIXEL_SPACING => c.pixel_spacing = Some(decimal_n::<2>(tag, v)?),
            Tag::SLICE_LOCATION => c.slice_location = Some(decimal_n::<1>(tag, v)?[0]),
            Tag::IMAGE_POSITION => c.image_position = Some(decimal_n::<3>(tag, v)?),
            Tag::RESCALE_SLOPE => c.rescale_slope = Some(decimal_n::<1>(tag, v)?[0]),
            Tag::RESCALE_INTERCEPT => c.rescale_intercept = Some(decimal_n::<1>(tag, v)?[0]),
            Tag::PIXEL_DATA => {
                if el.vr != Vr::Ow {
                    return Err(DicomError::InvalidValue {
                        tag,
                        reason: "pixel data must be OW".into(),
                    });
                }
                c.pixel_bytes = Some(Ok(v.to_vec()));
            }
            _ => {}
        }
    }

    let study_uid = c.study_uid.ok_or(DicomError::MissingTag(Tag::STUDY_UID))?;
    let series_uid = c.series_uid.ok_or(DicomError::MissingTag(Tag::SERIES_UID))?;
    let sop_uid = c.sop_uid.ok_or(DicomError::MissingTag(Tag::SOP_UID))?;
    let rows = c.rows.ok_or(DicomError::MissingTag(Tag::ROWS))?;
    let cols = c.cols.ok_or(DicomError::MissingTag(Tag::COLUMNS))?;
    let pixel_spacing = c
        .pixel_spacing
        .ok_or(DicomError::MissingTag(Tag::PIXEL_SPACING))?;
    let slice_location = c
        .slice_location
        .ok_or(DicomError::MissingTag(Tag::SLICE_LOCATION))?;
    let image_position = c
        .image_position
        .ok_or(DicomError::MissingTag(Tag::IMAGE_POSITION))?;
    let rescale_slope = c
        .rescale_slope
        .ok_or(DicomError::MissingTag(Tag::RESCALE_SLOPE))?;
    let rescale_intercept = c
        .rescale_intercept
        .ok_or(DicomError::MissingTag(Tag::RESCALE_INTERCEPT))?;
    let bits_stored = c.bits_stored.ok_or(DicomError::MissingTag(Tag::BITS_STORED))?;
    let expected = rows as usize * cols as usize;
    let pixel_bytes = match c.pixel_bytes {
        None => return Err(DicomError::MissingTag(Tag::PIXEL_DATA)),
        Some(Err(())) => {
            return Err(DicomError::PixelCountMismatch {
                expected,
                found: None,
            })
        }
        Some(Ok(b)) => b,
    };
    if pixel_bytes.len() != expected * 2 {
        return Err(DicomError::PixelCountMismatch {
            expected,
            found: Some(pixel_bytes.len() / 2),
        });
    }
    let pixel_data = pixel_bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();

    let slice = SliceImage {
        study_uid,
        series_uid,
        sop_uid,
        rows,
        cols,
        pixel_spacing,
        slice_location,
        image_position,
        rescale_slope,
        rescale_intercept,
        bits_stored,
        pixel_data,
    };
    slice.validate()?;
    Ok(slice)
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn element(&mut self, tag: Tag, vr: Vr, value: &[u8]) {
        debug_assert!(value.len() % 2 == 0);
        self.out.extend_from_slice(&tag.group.to_le_bytes());
        self.out.extend_from_slice(&tag.element.to_le_bytes());
        self.out.extend_from_slice(&vr.code());
        if vr.has_long_length() {
            self.out.extend_from_slice(&[0, 0]);
            self.out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        } else {
            self.out.extend_from_slice(&(value.len() as u16).to_le_bytes());
        }
        self.out.extend_from_slice(value);
    }

    fn uid(&mut self, tag: Tag, uid: &str) {
        self.element(tag, Vr::Ui, &padded(uid.as_bytes(), 0));
    }

    fn decimal(&mut self, tag: Tag, values: &[f64]) {
        let s = values
            .iter()
            .map(|v| format_decimal(*v))
            .collect::<Vec<_>>()
            .join("\\");
        self.element(tag, Vr::Ds, &padded(s.as_bytes(), b' '));
    }

    fn ushort(&mut self, tag: Tag, v: u16) {
        self.element(tag, Vr::Us, &v.to_le_bytes());
    }
}

fn padded(bytes: &[u8], pad: u8) -> Vec<u8> {
    let mut v = bytes.to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

/// Shortest representation that parses back to the identical `f64`.
fn format_decimal(v: f64) -> String {
    format!("{v:?}")
}

/// Encode a slice. Deterministic: equal slices give identical bytes.
pub fn write_slice(slice: &SliceImage) -> Vec<u8> {
    let mut w = Writer {
        out: vec![0u8; PREAMBLE_LEN],
    };
    w.out.extend_from_slice(MAGIC);

    let ts = padded(EXPLICIT_VR_LE.as_bytes(), 0);
    let meta_len = (8 + ts.len()) as u32;
    w.element(Tag::META_GROUP_LENGTH, Vr::Ul, &meta_len.to_le_bytes());
    w.element(Tag::TRANSFER_SYNTAX, Vr::Ui, &ts);

    w.uid(Tag::SOP_UID, &slice.sop_uid);
    w.uid(Tag::STUDY_UID, &slice.study_uid);
    w.uid(Tag::SERIES_UID, &slice.series_uid);
    w.decimal(Tag::IMAGE_POSITION, &slice.image_position);
    w.decimal(Tag::SLICE_LOCATION, &[slice.slice_location]);
    w.ushort(Tag::ROWS, slice.rows);
    w.ushort(Tag::COLUMNS, slice.cols);
    w.decimal(Tag::PIXEL_SPACING, &slice.pixel_spacing);
    w.ushort(Tag::BITS_STORED, slice.bits_stored);
    w.decimal(Tag::RESCALE_INTERCEPT, &[slice.rescale_intercept]);
    w.decimal(Tag::RESCALE_SLOPE, &[slice.rescale_slope]);
    let pixels: Vec<u8> = slice
        .pixel_data
        .iter()
        .flat_map(|p| p.to_le_bytes())
        .collect();
    w.element(Tag::PIXEL_DATA, Vr::Ow, &pixels);
    w.out
}

/// Byte offset of the first pixel value in a file produced by [`write_slice`].
pub fn pixel_data_offset(bytes: &[u8]) -> Option<usize> {
    let mut reader = Reader {
        bytes,
        pos: PREAMBLE_LEN + 4,
    };
    loop {
        let before = reader.pos;
        match reader.next().ok()? {
            Next::Element(el) if el.tag == Tag::PIXEL_DATA => return Some(before + 12),
            Next::Element(_) => {}
            _ => return None,
        }
    }
}
