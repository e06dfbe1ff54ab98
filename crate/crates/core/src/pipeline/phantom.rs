//! Synthetic multi-modal cases with nested tumor regions.
//!
//! Each phantom is an ellipsoidal brain holding an ellipsoidal edema, a
//! tumor core inside it and an enhancing shell on the rim of the core.
//! FLAIR and T2 are bright over fluid (edema, necrosis); T1-Gd is bright
//! over the enhancing rim.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::{
    grid_index, write_raw, zscore_normalize, CaseEntry, DatasetManifest, LabelEncoding, Modality,
    MultiModalCase, NormRegion, SegmentationMask, Volume,
};

use super::PipelineError;

/// Mean intensity per tissue, one row per modality in
/// `T1, T1-Gd, T2, FLAIR` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityProfile {
    pub brain: [f32; 4],
    pub edema: [f32; 4],
    pub necrosis: [f32; 4],
    pub enhancing: [f32; 4],
}

impl Default for IntensityProfile {
    fn default() -> Self {
        Self {
            brain: [0.60, 0.60, 0.50, 0.50],
            edema: [0.50, 0.55, 1.10, 1.20],
            necrosis: [0.30, 0.30, 1.30, 0.70],
            enhancing: [0.55, 1.40, 0.80, 0.90],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub count: usize,
    pub seed: u64,
    /// Brain semi-axes as fractions of the grid dims.
    pub brain_radius: f32,
    /// Edema semi-axis range in voxels.
    pub edema_radius: [f32; 2],
    /// Core semi-axes relative to the edema.
    pub core_fraction: [f32; 2],
    /// Necrotic interior relative to the core; the rest of the core is the
    /// enhancing shell.
    pub necrosis_fraction: [f32; 2],
    pub intensity: IntensityProfile,
    pub noise_std: f32,
}

impl PhantomSpec {
    pub fn toy() -> Self {
        Self {
            dims: [48, 48, 40],
            count: 25,
            seed: 7,
            brain_radius: 0.42,
            edema_radius: [7.0, 10.0],
            core_fraction: [0.5, 0.7],
            necrosis_fraction: [0.4, 0.6],
            intensity: IntensityProfile::default(),
            noise_std: 0.05,
        }
    }

    pub fn paper() -> Self {
        Self {
            dims: [160, 160, 128],
            count: 25,
            edema_radius: [20.0, 34.0],
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(format!("phantom: {m}")));
        let ordered = |r: [f32; 2]| r[0] > 0.0 && r[0] <= r[1];
        if self.dims.contains(&0) || self.count == 0 {
            return bad("dims and count must be positive");
        }
        if !ordered(self.edema_radius)
            || !ordered(self.core_fraction)
            || !ordered(self.necrosis_fraction)
        {
            return bad("radius ranges must be positive and ordered");
        }
        if self.core_fraction[1] >= 1.0 || self.necrosis_fraction[1] >= 1.0 {
            return bad("nested fractions must stay below 1");
        }
        if !(self.brain_radius > 0.0 && self.brain_radius <= 0.5) || self.noise_std < 0.0 {
            return bad("brain_radius must lie in (0, 0.5] and noise_std be non-negative");
        }
        let fits =
            (0..3).all(|a| self.dims[a] as f32 * self.brain_radius > self.edema_radius[1] + 1.0);
        if !fits {
            return bad("edema does not fit inside the brain");
        }
        Ok(())
    }

    pub fn case_id(&self, index: usize) -> String {
        format!("phantom_{index:03}")
    }
}

/// Squared normalized distance from `c` with semi-axes `r`.
fn ellipsoid(p: [f32; 3], c: [f32; 3], r: [f32; 3]) -> f32 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

/// Raw (un-normalized) phantom number `index`.
pub fn generate_case(spec: &PhantomSpec, index: usize) -> Result<MultiModalCase, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64),
    );
    let dims = spec.dims;
    let centre = dims.map(|n| (n as f32 - 1.0) / 2.0);
    let brain_r = dims.map(|n| n as f32 * spec.brain_radius);

    let edema_r: [f32; 3] =
        std::array::from_fn(|_| rng.gen_range(spec.edema_radius[0]..=spec.edema_radius[1]));
    let core_r = edema_r.map(|r| r * rng.gen_range(spec.core_fraction[0]..=spec.core_fraction[1]));
    let nec = rng.gen_range(spec.necrosis_fraction[0]..=spec.necrosis_fraction[1]);
    let nec_r = core_r.map(|r| r * nec);
    // keep the edema inside the brain: the ellipsoid with semi-axes
    // brain_r − edema_r bounds the admissible centres
    let room: [f32; 3] = std::array::from_fn(|a| (brain_r[a] - edema_r[a] - 1.0).max(0.0));
    let tumor_c = loop {
        let u: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-1.0f32..=1.0));
        if u.iter().map(|v| v * v).sum::<f32>() <= 1.0 {
            break std::array::from_fn(|a| centre[a] + u[a] * room[a]);
        }
    };
    let core_c: [f32; 3] = std::array::from_fn(|a| {
        tumor_c[a] + rng.gen_range(-0.3f32..=0.3) * (edema_r[a] - core_r[a])
    });
    let gain: [f32; 4] = std::array::from_fn(|_| rng.gen_range(0.9f32..=1.1));
    let noise = Normal::new(0.0f32, spec.noise_std.max(f32::MIN_POSITIVE)).expect("valid std");

    let n = dims.iter().product();
    let mut labels = vec![0u8; n];
    let mut images = vec![vec![0.0f32; n]; 4];
    let p = &spec.intensity;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pt = [x as f32, y as f32, z as f32];
                if ellipsoid(pt, centre, brain_r) > 1.0 {
                    continue;
                }
                let i = grid_index(dims, x, y, z);
                let (label, tissue) = if ellipsoid(pt, core_c, nec_r) <= 1.0 {
                    (1, &p.necrosis)
                } else if ellipsoid(pt, core_c, core_r) <= 1.0 {
                    (3, &p.enhancing)
                } else if ellipsoid(pt, tumor_c, edema_r) <= 1.0 {
                    (2, &p.edema)
                } else {
                    (0, &p.brain)
                };
                labels[i] = label;
                let texture = 0.03
                    * ((x as f32 * 0.31).sin() + (y as f32 * 0.23).cos() + (z as f32 * 0.17).sin());
                for m in 0..4 {
                    let v = gain[m] * tissue[m] + texture + noise.sample(&mut rng);
                    // zero marks background for normalization
                    images[m][i] = if v == 0.0 { f32::EPSILON } else { v };
                }
            }
        }
    }
    let vols: Vec<Volume> = images
        .into_iter()
        .zip(Modality::ALL)
        .map(|(data, m)| Volume::new(dims, [1.0; 3], data).map(|v| v.with_name(m.key())))
        .collect::<Result<_, _>>()
        .map_err(PipelineError::data)?;
    let mask = SegmentationMask::new(dims, labels).map_err(PipelineError::data)?;
    MultiModalCase::new(
        spec.case_id(index),
        vols.try_into().expect("four"),
        Some(mask),
    )
    .map_err(PipelineError::data)
}

/// Z-score every modality over its non-zero voxels, as the loader does.
pub fn normalize_case(case: &MultiModalCase) -> Result<MultiModalCase, PipelineError> {
    let vols = case.modalities().clone().map(|v| {
        zscore_normalize(&v, NormRegion::NonzeroOnly)
            .volume
            .with_name(v.name.clone())
    });
    case.with_data(vols, case.label.clone())
        .map_err(PipelineError::data)
}

/// All phantoms of `spec`, normalized, in index order.
pub fn phantom_cases(spec: &PhantomSpec) -> Result<Vec<MultiModalCase>, PipelineError> {
    (0..spec.count)
        .into_par_iter()
        .map(|i| normalize_case(&generate_case(spec, i)?))
        .collect()
}

/// Write every phantom as raw volumes plus sidecars and return the
/// manifest (also saved as `manifest.json` in `out_dir`).
pub fn phantom_generate(
    spec: &PhantomSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, PipelineError> {
    let encoding = LabelEncoding::default();
    let entries: Vec<CaseEntry> = (0..spec.count)
        .into_par_iter()
        .map(|i| -> Result<CaseEntry, PipelineError> {
            let case = generate_case(spec, i)?;
            let dir = PathBuf::from(&case.case_id);
            std::fs::create_dir_all(out_dir.join(&dir))?;
            let write = |name: &str, v: &Volume| -> Result<PathBuf, PipelineError> {
                let rel = dir.join(format!("{name}.raw"));
                write_raw(&out_dir.join(&rel), v).map_err(PipelineError::data)?;
                Ok(rel)
            };
            let mut paths = Vec::new();
            for m in Modality::ALL {
                paths.push(write(m.key(), case.modality(m))?);
            }
            let label = case.label.as_ref().expect("phantoms carry labels");
            let stored: Vec<f32> = label
                .labels()
                .iter()
                .map(|&c| encoding.decode(c).expect("encoded class") as f32)
                .collect();
            let label_vol =
                Volume::new(label.dims(), label.spacing, stored).map_err(PipelineError::data)?;
            let label_path = write("label", &label_vol)?;
            let mut it = paths.into_iter();
            Ok(CaseEntry {
                case_id: case.case_id.clone(),
                t1: it.next(),
                t1gd: it.next(),
                t2: it.next(),
                flair: it.next(),
                label: Some(label_path),
            })
        })
        .collect::<Result<_, _>>()?;
    let manifest = DatasetManifest {
        cases: entries,
        label_encoding: encoding,
        base_dir: out_dir.to_path_buf(),
    };
    manifest
        .save(&out_dir.join("manifest.json"))
        .map_err(PipelineError::data)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::load_case;

    fn small() -> PhantomSpec {
        PhantomSpec {
            count: 2,
            ..PhantomSpec::toy()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_case(&small(), 1).unwrap();
        let b = generate_case(&small(), 1).unwrap();
        assert_eq!(a, b);
        let c = generate_case(&PhantomSpec { seed: 8, ..small() }, 1).unwrap();
        assert_ne!(a.label, c.label);
    }

    #[test]
    fn nesting_and_imbalance() {
        for i in 0..4 {
            let case = generate_case(&small(), i).unwrap();
            let m = case.label.as_ref().unwrap();
            let dims = m.dims();
            let flair = case.modality(Modality::Flair);
            let mut counts = [0usize; 4];
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let l = m.get(x, y, z);
                        counts[l as usize] += 1;
                        if l != 0 {
                            assert!(flair.get(x, y, z) != 0.0, "tumor outside the brain");
                        }
                        if l == 3 {
                            // the enhancing shell never touches healthy tissue directly
                            let near_healthy = [
                                (-1i32, 0i32, 0i32),
                                (1, 0, 0),
                                (0, -1, 0),
                                (0, 1, 0),
                                (0, 0, -1),
                                (0, 0, 1),
                            ]
                            .iter()
                            .any(|&(dx, dy, dz)| {
                                let q = [x as i32 + dx, y as i32 + dy, z as i32 + dz];
                                q.iter().zip(dims).all(|(&v, n)| v >= 0 && (v as usize) < n)
                                    && m.get(q[0] as usize, q[1] as usize, q[2] as usize) == 0
                            });
                            assert!(!near_healthy, "enhancing voxel adjacent to healthy tissue");
                        }
                    }
                }
            }
            let total: usize = counts.iter().sum();
            assert!(counts[0] as f64 / total as f64 > 0.8);
            assert!(
                counts[1] > 0 && counts[2] > 0 && counts[3] > 0,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let manifest = phantom_generate(&spec, dir.path()).unwrap();
        assert_eq!(manifest.cases.len(), 2);
        let reloaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        let case = load_case(&reloaded, "phantom_001", NormRegion::NonzeroOnly).unwrap();
        let direct = normalize_case(&generate_case(&spec, 1).unwrap()).unwrap();
        assert_eq!(case.label, direct.label);
        assert_eq!(
            case.modality(Modality::T1Gd).data(),
            direct.modality(Modality::T1Gd).data()
        );

        let again = tempfile::tempdir().unwrap();
        phantom_generate(&spec, again.path()).unwrap();
        let rel = Path::new("phantom_000").join("flair.raw");
        assert_eq!(
            std::fs::read(dir.path().join(&rel)).unwrap(),
            std::fs::read(again.path().join(&rel)).unwrap()
        );
    }
}
