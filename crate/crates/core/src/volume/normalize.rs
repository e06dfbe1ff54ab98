use serde::{Deserialize, Serialize};

use super::Volume;

/// Which voxels contribute to the normalization statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRegion {
    All,
    /// Only non-zero voxels are used and normalized; zeros stay zero.
    #[default]
    NonzeroOnly,
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub volume: Volume,
    /// Set when the region was empty or had zero variance; the region is
    /// then mapped to zero instead of divided by zero.
    pub constant_region: bool,
}

/// Z-score normalization, `(v − μ) / σ` with population statistics.
pub fn zscore_normalize(volume: &Volume, region: NormRegion) -> Normalized {
    let in_region = |v: f32| match region {
        NormRegion::All => true,
        NormRegion::NonzeroOnly => v != 0.0,
    };
    let mut count = 0usize;
    let mut sum = 0.0f64;
    for &v in volume.data() {
        if in_region(v) {
            count += 1;
            sum += v as f64;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let mut ss = 0.0f64;
    for &v in volume.data() {
        if in_region(v) {
            ss += (v as f64 - mean).powi(2);
        }
    }
    let std = if count > 0 {
        (ss / count as f64).sqrt()
    } else {
        0.0
    };
    let constant_region = count == 0 || std <= 1e-12 * mean.abs().max(1.0);
    let data = volume
        .data()
        .iter()
        .map(|&v| {
            if !in_region(v) || constant_region {
                0.0
            } else {
                ((v as f64 - mean) / std) as f32
            }
        })
        .collect();
    Normalized {
        volume: volume.replace_data(data),
        constant_region,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nonzero_only_keeps_background() {
        let v = Volume::new([4, 1, 1], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let n = zscore_normalize(&v, NormRegion::NonzeroOnly);
        let s = (2.0f32 / 3.0).sqrt();
        let want = [0.0, -1.0 / s, 0.0, 1.0 / s];
        for (a, b) in n.volume.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(!n.constant_region);
    }

    #[test]
    fn constant_region_flagged() {
        let v = Volume::filled([3, 3, 3], 5.0);
        let n = zscore_normalize(&v, NormRegion::All);
        assert!(n.constant_region);
        assert!(n.volume.data().iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn normalized_region_has_unit_moments(vals in prop::collection::vec(-50.0f32..50.0, 8..64)) {
            let n = vals.len();
            let v = Volume::new([n, 1, 1], [1.0; 3], vals).unwrap();
            let out = zscore_normalize(&v, NormRegion::All);
            prop_assume!(!out.constant_region);
            let mean: f64 = out.volume.data().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let var: f64 = out.volume.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
