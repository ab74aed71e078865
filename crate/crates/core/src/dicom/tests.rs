use proptest::prelude::*;

use super::*;

pub(crate) fn slice_at(z: f64, sop: &str, pixels: Vec<i16>, rows: u16, cols: u16) -> SliceImage {
    SliceImage {
        study_uid: "1.2.826.0.1.3680043.2.1".into(),
        series_uid: "1.2.826.0.1.3680043.2.1.1".into(),
        sop_uid: sop.into(),
        rows,
        cols,
        pixel_spacing: [0.5, 0.5],
        slice_location: z,
        image_position: [-12.5, -12.5, z],
        rescale_slope: 1.0,
        rescale_intercept: -1024.0,
        bits_stored: 16,
        pixel_data: pixels,
    }
}

fn tiny() -> SliceImage {
    slice_at(0.0, "1.2.3.4", vec![0, 1, 2, 3], 2, 2)
}

#[test]
fn round_trip_small_slice() {
    let s = tiny();
    let parsed = parse_slice(&write_slice(&s)).unwrap();
    assert_eq!(parsed, s);
}

#[test]
fn writes_are_deterministic() {
    assert_eq!(write_slice(&tiny()), write_slice(&tiny()));
}

#[test]
fn preamble_and_magic() {
    let bytes = write_slice(&tiny());
    assert!(bytes[..128].iter().all(|b| *b == 0));
    assert_eq!(&bytes[128..132], b"DICM");
}

#[test]
fn elements_are_in_ascending_tag_order() {
    let bytes = write_slice(&tiny());
    let mut pos = 132;
    let mut tags = Vec::new();
    while pos < bytes.len() {
        let tag = Tag::new(
            u16::from_le_bytes([bytes[pos], bytes[pos + 1]]),
            u16::from_le_bytes([bytes[pos + 2], bytes[pos + 3]]),
        );
        let vr = &bytes[pos + 4..pos + 6];
        let (len, header) = if vr == b"OW" {
            (u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap()) as usize, 12)
        } else {
            (u16::from_le_bytes([bytes[pos + 6], bytes[pos + 7]]) as usize, 8)
        };
        assert_eq!(len % 2, 0, "odd length on {tag}");
        tags.push(tag);
        pos += header + len;
    }
    assert_eq!(pos, bytes.len());
    let mut sorted = tags.clone();
    sorted.sort();
    assert_eq!(tags, sorted);
    assert_eq!(tags.len(), 14);
}

#[test]
fn truncated_before_pixel_data() {
    let bytes = write_slice(&tiny());
    let off = pixel_data_offset(&bytes).unwrap() - 12;
    assert_eq!(
        parse_slice(&bytes[..off]),
        Err(DicomError::MissingTag(Tag::PIXEL_DATA))
    );
}

#[test]
fn truncated_inside_pixel_data() {
    let bytes = write_slice(&tiny());
    let err = parse_slice(&bytes[..bytes.len() - 2]).unwrap_err();
    assert!(matches!(err, DicomError::PixelCountMismatch { expected: 4, .. }));
}

#[test]
fn missing_magic() {
    let mut bytes = write_slice(&tiny());
    bytes[129] = b'X';
    assert_eq!(parse_slice(&bytes), Err(DicomError::MissingMagic));
    assert_eq!(parse_slice(&[0u8; 10]), Err(DicomError::MissingMagic));
}

#[test]
fn rejects_implicit_vr_transfer_syntax() {
    let bytes = write_slice(&tiny());
    // The transfer syntax value starts right after the meta group length
    // element (12 bytes) and its own 8-byte header.
    let ts_start = 132 + 12 + 8;
    let mut patched = bytes.clone();
    let implicit = b"1.2.840.10008.1.2\0\0\0";
    patched[ts_start..ts_start + 20].copy_from_slice(implicit);
    assert!(matches!(
        parse_slice(&patched),
        Err(DicomError::UnsupportedTransferSyntax(ts)) if ts == "1.2.840.10008.1.2"
    ));
}

#[test]
fn pixel_count_mismatch_on_inconsistent_rows() {
    let mut s = tiny();
    s.rows = 3;
    let err = parse_slice(&write_slice(&s)).unwrap_err();
    assert_eq!(
        err,
        DicomError::PixelCountMismatch {
            expected: 6,
            found: Some(4)
        }
    );
}

#[test]
fn typical_ct_slice_rescales_1024_to_zero_hu() {
    let n = 512 * 512;
    let pixels: Vec<i16> = (0..n).map(|i| (i % 2048) as i16).collect();
    let s = slice_at(0.0, "1.2.3.5", pixels, 512, 512);
    let parsed = parse_slice(&write_slice(&s)).unwrap();
    assert_eq!(parsed.pixel_data[1024], 1024);
    assert_eq!(parsed.rescale(1024), 0.0);
    assert_eq!(parsed.rescale(parsed.pixel_data[0]), -1024.0);
}

#[test]
fn flipping_one_pixel_byte_changes_one_pixel() {
    let s = slice_at(0.0, "1.2.3.6", vec![10, 20, 30, 40, 50, 60], 2, 3);
    let mut bytes = write_slice(&s);
    let off = pixel_data_offset(&bytes).unwrap();
    // Low byte of element 4.
    bytes[off + 2 * 4] ^= 0xFF;
    let parsed = parse_slice(&bytes).unwrap();
    let diff: Vec<usize> = (0..6)
        .filter(|&i| parsed.pixel_data[i] != s.pixel_data[i])
        .collect();
    assert_eq!(diff, vec![4]);
    assert_eq!(parsed.pixel_data[4], 50 ^ 0xFF);
}

#[test]
fn uid_rules() {
    assert!(is_valid_uid("1.2.840.10008"));
    assert!(!is_valid_uid(""));
    assert!(!is_valid_uid("1..2"));
    assert!(!is_valid_uid("1.2a"));
    assert!(!is_valid_uid(&"1".repeat(65)));
    let mut s = tiny();
    s.sop_uid = "abc".into();
    assert!(matches!(s.validate(), Err(DicomError::InvalidValue { .. })));
}

#[test]
fn three_uniform_slices() {
    let slices = (0..3)
        .map(|i| slice_at(5.0 * i as f64, &format!("1.2.3.{i}"), vec![1024; 4], 2, 2))
        .collect();
    let v = assemble_volume(slices).unwrap();
    assert_eq!(v.shape(), crate::grid::Shape::new(2, 2, 3));
    assert_eq!(v.spacing.sz, 5.0);
    assert_eq!((v.spacing.sx, v.spacing.sy), (0.5, 0.5));
    assert!(v.voxels.as_slice().iter().all(|&h| h == 0.0));
}

#[test]
fn spacing_tolerance_is_inclusive() {
    // gaps {5, 6}: median 5.5, both deviate by exactly 0.5
    let make = || {
        [0.0, 5.0, 11.0]
            .iter()
            .enumerate()
            .map(|(i, z)| slice_at(*z, &format!("1.2.3.{i}"), vec![0; 4], 2, 2))
            .collect::<Vec<_>>()
    };
    let accept = AssemblyOptions {
        spacing_tolerance_mm: 0.5,
        ..Default::default()
    };
    let v = assemble_volume_with(make(), &accept).unwrap();
    assert_eq!(v.spacing.sz, 5.5);
    let reject = AssemblyOptions {
        spacing_tolerance_mm: 0.4,
        ..Default::default()
    };
    assert!(matches!(
        assemble_volume_with(make(), &reject),
        Err(AssemblyError::NonUniformSpacing { median, .. }) if median == 5.5
    ));
    assert!(matches!(
        assemble_volume(make()),
        Err(AssemblyError::NonUniformSpacing { .. })
    ));
}

#[test]
fn single_slice_gets_default_spacing() {
    let v = assemble_volume(vec![tiny()]).unwrap();
    assert_eq!(v.shape().nz, 1);
    assert_eq!(v.spacing.sz, 1.0);
}

#[test]
fn empty_and_mixed_inputs() {
    assert_eq!(assemble_volume(vec![]), Err(AssemblyError::EmptyInput));
    let mut other = slice_at(1.0, "1.2.3.9", vec![0; 4], 2, 2);
    other.series_uid = "1.2.9".into();
    assert!(matches!(
        assemble_volume(vec![tiny(), other]),
        Err(AssemblyError::MixedSeries(_))
    ));
}

#[test]
fn duplicate_sop_last_write_wins() {
    let a = slice_at(0.0, "1.2.3.1", vec![0; 4], 2, 2);
    let b = slice_at(1.0, "1.2.3.2", vec![0; 4], 2, 2);
    let b2 = slice_at(1.0, "1.2.3.2", vec![2024; 4], 2, 2);
    let v = assemble_volume(vec![a, b, b2]).unwrap();
    assert_eq!(v.shape().nz, 2);
    assert_eq!(*v.voxels.get(0, 0, 1), 1000.0);
}

prop_compose! {
    fn uid()(parts in prop::collection::vec(0u32..100_000, 1..8)) -> String {
        parts.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(".")
    }
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e4f64..1e4,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
    ]
}

fn positive() -> impl Strategy<Value = f64> {
    prop_oneof![1e-3f64..10.0, any::<f64>().prop_filter("positive", |v| v.is_finite() && *v > 0.0)]
}

prop_compose! {
    pub(crate) fn arb_slice()(
        study in uid(), series in uid(), sop in uid(),
        rows in 1u16..6, cols in 1u16..6,
        ps in [positive(), positive()],
        loc in finite(), pos in [finite(), finite(), finite()],
        slope in finite(), intercept in finite(),
        seed in any::<u64>(),
    ) -> SliceImage {
        let n = rows as usize * cols as usize;
        let pixel_data = (0..n as u64)
            .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add(i.wrapping_mul(1442695040888963407)) >> 48) as i16)
            .collect();
        SliceImage {
            study_uid: study, series_uid: series, sop_uid: sop,
            rows, cols, pixel_spacing: ps, slice_location: loc, image_position: pos,
            rescale_slope: slope, rescale_intercept: intercept, bits_stored: 16, pixel_data,
        }
    }
}

fn bits(s: &SliceImage) -> Vec<u64> {
    s.pixel_spacing
        .iter()
        .chain(s.image_position.iter())
        .chain([s.slice_location, s.rescale_slope, s.rescale_intercept].iter())
        .map(|v| v.to_bits())
        .collect()
}

proptest! {
    #[test]
    fn parse_inverts_write(s in arb_slice()) {
        let parsed = parse_slice(&write_slice(&s)).unwrap();
        prop_assert_eq!(bits(&parsed), bits(&s));
        prop_assert_eq!(parsed, s);
    }

    #[test]
    fn assembly_is_permutation_invariant(n in 1usize..7, rot in 0usize..7, rev in any::<bool>()) {
        let slices: Vec<SliceImage> = (0..n)
            .map(|i| slice_at(2.5 * i as f64, &format!("1.2.7.{i}"), vec![i as i16; 6], 2, 3))
            .collect();
        let reference = assemble_volume(slices.clone()).unwrap();
        let mut shuffled = slices;
        shuffled.rotate_left(rot % n);
        if rev { shuffled.reverse(); }
        prop_assert_eq!(assemble_volume(shuffled).unwrap(), reference);
    }

    #[test]
    fn rescale_is_exact_affine(stored in any::<i16>(), slope in -4.0f64..4.0, intercept in -2048.0f64..2048.0) {
        let mut s = slice_at(0.0, "1.2.3", vec![stored], 1, 1);
        s.rescale_slope = slope;
        s.rescale_intercept = intercept;
        let v = assemble_volume(vec![s]).unwrap();
        prop_assert_eq!(v.voxels.as_slice()[0].to_bits(), (slope * stored as f64 + intercept).to_bits());
    }
}
