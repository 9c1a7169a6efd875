//! Archive byte format: an independent writer and round-trip fuzzing.

use proptest::prelude::*;
use vpk_core::archive::{load_archive, save_archive, ArchiveError, TensorArchive, TensorEntry};

/// Minimal writer built from the byte layout alone: magic, little-endian
/// manifest length, hand-written JSON manifest, raw data.
fn write_by_hand(tensors: &[(&str, &[usize], &[f32])]) -> Vec<u8> {
    let mut manifest = String::from("[");
    let mut data = Vec::new();
    for (i, (name, shape, values)) in tensors.iter().enumerate() {
        if i > 0 {
            manifest.push(',');
        }
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            r#"{{"name":"{name}","dtype":"f32","shape":[{}],"offset":{},"nbytes":{}}}"#,
            dims.join(","),
            data.len(),
            4 * values.len()
        ));
        for v in *values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push(']');
    let mut out = b"VPKTNS01".to_vec();
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&data);
    out
}

#[test]
fn hand_written_archive_loads_equal() {
    let w = [1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e7, f32::INFINITY, -2.0];
    let scalar = [42.0f32];
    let tensors: [(&str, &[usize], &[f32]); 3] = [("layer.w", &[2, 3], &w), ("s", &[], &scalar), ("empty", &[0, 4], &[])];
    let bytes = write_by_hand(&tensors);
    let a = load_archive(&bytes).unwrap();
    let mut want = TensorArchive::new();
    for (name, shape, values) in tensors {
        want.push(name, TensorEntry::from_f32(shape, values));
    }
    assert_eq!(a, want);
    assert_eq!(save_archive(&a).unwrap(), bytes);
}

#[test]
fn gaps_between_tensors_are_tolerated() {
    let manifest = r#"[{"name":"a","dtype":"f32","shape":[1],"offset":4,"nbytes":4}]"#;
    let mut bytes = b"VPKTNS01".to_vec();
    bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    bytes.extend_from_slice(&[0xAA; 4]);
    bytes.extend_from_slice(&7.0f32.to_le_bytes());
    let a = load_archive(&bytes).unwrap();
    assert_eq!(a.get("a").unwrap().to_f32(), vec![7.0]);
}

#[test]
fn truncated_data_is_reported() {
    let mut bytes = write_by_hand(&[("x", &[4], &[1.0, 2.0, 3.0, 4.0])]);
    bytes.truncate(bytes.len() - 1);
    assert!(matches!(load_archive(&bytes), Err(ArchiveError::TruncatedData { .. })));
}

fn entries() -> impl Strategy<Value = Vec<(String, Vec<usize>, Vec<u32>)>> {
    prop::collection::vec(
        ("[a-z_.0-9]{1,12}", prop::collection::vec(0usize..4, 0..4)).prop_flat_map(|(name, shape)| {
            let n = shape.iter().product::<usize>();
            (Just(name), Just(shape), prop::collection::vec(any::<u32>(), n))
        }),
        0..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip_is_bitwise(items in entries()) {
        let mut a = TensorArchive::new();
        let mut seen = std::collections::HashSet::new();
        for (name, shape, bits) in items {
            if seen.insert(name.clone()) {
                let values: Vec<f32> = bits.into_iter().map(f32::from_bits).collect();
                a.push(name, TensorEntry::from_f32(&shape, &values));
            }
        }
        let bytes = save_archive(&a).unwrap();
        let back = load_archive(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(save_archive(&back).unwrap(), bytes);
    }
}
