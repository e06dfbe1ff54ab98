use gliomaseg::volume::{
    read_nifti, read_raw, write_nifti, write_raw, zscore_normalize, NormRegion, Volume, VolumeError,
};
use proptest::prelude::*;

fn volume() -> impl Strategy<Value = Volume> {
    (1usize..6, 1usize..6, 1usize..5)
        .prop_flat_map(|(x, y, z)| {
            let n = x * y * z;
            (
                Just([x, y, z]),
                prop::collection::vec(
                    prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL,
                    n,
                ),
                prop::array::uniform3(0.25f32..4.0),
            )
        })
        .prop_map(|(dims, data, spacing)| Volume::new(dims, spacing, data).unwrap())
}

fn bits(v: &Volume) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raw_round_trip_is_bit_exact(v in volume()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        write_raw(&path, &v).unwrap();
        let back = read_raw(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing(), v.spacing());
        prop_assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn nifti_round_trip_is_bit_exact(v in volume()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        write_nifti(&path, &v).unwrap();
        let back = read_nifti(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn zscore_is_idempotent(
        vals in prop::collection::vec(prop_oneof![Just(0.0f32), -200.0f32..200.0], 8..200),
        all in any::<bool>(),
    ) {
        let region = if all { NormRegion::All } else { NormRegion::NonzeroOnly };
        let n = vals.len();
        let v = Volume::new([n, 1, 1], [1.0; 3], vals).unwrap();
        let once = zscore_normalize(&v, region).volume;
        let twice = zscore_normalize(&once, region).volume;
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn constructed_volumes_are_finite(
        vals in prop::collection::vec(prop::num::f32::ANY, 1..40),
    ) {
        let n = vals.len();
        match Volume::new([n, 1, 1], [1.0; 3], vals.clone()) {
            Ok(v) => {
                prop_assert_eq!(v.len(), n);
                prop_assert!(v.data().iter().all(|x| x.is_finite()));
            }
            Err(VolumeError::NonFiniteVoxel(i)) => prop_assert!(!vals[i].is_finite()),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }
}

#[test]
fn non_finite_payload_is_rejected_on_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.raw");
    write_raw(&path, &Volume::filled([2, 1, 1], 1.0)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        read_raw(&path),
        Err(VolumeError::NonFiniteVoxel(1))
    ));
}
