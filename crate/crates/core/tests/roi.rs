use gliomaseg::roi::{crop_grid, expand_bbox, mask_bbox, plan_crop, restore_grid, BBox3};
use gliomaseg::volume::grid_index;
use proptest::prelude::*;

fn grid_and_mask() -> impl Strategy<Value = ([usize; 3], Vec<f32>)> {
    prop::array::uniform3(2usize..14).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        (
            Just(dims),
            prop::collection::vec(prop_oneof![3 => Just(0.0f32), 1 => 0.0f32..1.0], n),
        )
    })
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..dims[2])
        .flat_map(move |z| (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z])))
}

fn random_box() -> impl Strategy<Value = ([usize; 3], BBox3, [usize; 3])> {
    prop::array::uniform3(1usize..20)
        .prop_flat_map(|dims| {
            let lo = dims.map(|d| 0..d);
            (Just(dims), lo, prop::array::uniform3(1usize..24))
        })
        .prop_flat_map(|(dims, lo, min_dims)| {
            let hi = [0, 1, 2].map(|a| lo[a]..dims[a]);
            (Just(dims), Just(lo), hi, Just(min_dims))
        })
        .prop_map(|(dims, lo, hi, min_dims)| (dims, BBox3 { lo, hi }, min_dims))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn thresholded_voxels_lie_inside_the_expanded_box(
        (dims, vals) in grid_and_mask(),
        threshold in 0.0f32..0.9,
        tol in 0usize..5,
    ) {
        match mask_bbox(&vals, dims, threshold) {
            None => prop_assert!(vals.iter().all(|&v| v <= threshold)),
            Some(b) => {
                let e = expand_bbox(b, tol, dims);
                prop_assert!((0..3).all(|a| e.hi[a] < dims[a]));
                for p in coords(dims) {
                    if vals[grid_index(dims, p[0], p[1], p[2])] > threshold {
                        prop_assert!(b.contains(p) && e.contains(p));
                    }
                }
            }
        }
    }

    #[test]
    fn crop_is_selection_plus_zero_padding((dims, bbox, min_dims) in random_box(), seed in any::<u32>()) {
        let rec = plan_crop(bbox, dims, min_dims).unwrap();
        prop_assert_eq!(rec.cropped_dims, [0, 1, 2].map(|a| rec.bbox.extent()[a] + rec.pad_lo[a] + rec.pad_hi[a]));
        prop_assert!((0..2).all(|a| rec.cropped_dims[a] >= min_dims[a]));
        prop_assert_eq!(rec.cropped_dims[2], min_dims[2]);

        let n: usize = dims.iter().product();
        let src: Vec<f32> = (0..n).map(|i| (i as f32) + (seed % 97) as f32 + 1.0).collect();
        let crop = crop_grid(&src, &rec, 0.0);
        let origin = rec.origin();
        for c in coords(rec.cropped_dims) {
            let s: [isize; 3] = std::array::from_fn(|a| origin[a] + c[a] as isize);
            let inside = (0..3).all(|a| s[a] >= rec.bbox.lo[a] as isize && s[a] <= rec.bbox.hi[a] as isize);
            let got = crop[grid_index(rec.cropped_dims, c[0], c[1], c[2])];
            if inside {
                let want = src[grid_index(dims, s[0] as usize, s[1] as usize, s[2] as usize)];
                prop_assert_eq!(got.to_bits(), want.to_bits());
            } else {
                prop_assert_eq!(got.to_bits(), 0.0f32.to_bits());
            }
        }
    }

    #[test]
    fn restore_after_crop_is_identity_on_the_box((dims, bbox, min_dims) in random_box()) {
        let rec = plan_crop(bbox, dims, min_dims).unwrap();
        let n: usize = dims.iter().product();
        let src: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        let back = restore_grid(&crop_grid(&src, &rec, f32::NAN), &rec, -7.0).unwrap();
        for p in coords(dims) {
            let i = grid_index(dims, p[0], p[1], p[2]);
            if rec.bbox.contains(p) {
                prop_assert_eq!(back[i].to_bits(), src[i].to_bits());
            } else {
                prop_assert_eq!(back[i], -7.0);
            }
        }
    }
}
