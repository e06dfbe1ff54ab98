//! Training augmentations and the reflection family used at test time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::NdArray;
use crate::real::Real;
use crate::volume::{grid_index, MultiModalCase, SegmentationMask, Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("magnitude must be non-negative, got {0}")]
    NonPositiveMagnitude(f64),
    #[error("TTA variant id {0} is outside 0..8")]
    BadVariantId(u8),
    #[error("expected a rank-5 array, got {0:?}")]
    BadShape(Vec<usize>),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normalized 1D Gaussian taps truncated at `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, AugmentError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AugmentError::NonPositiveSigma(sigma));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Separable Gaussian smoothing of an x-fastest grid with replicated edges.
pub fn gaussian_filter_3d(
    data: &[f32],
    dims: [usize; 3],
    sigma: f64,
) -> Result<Vec<f32>, AugmentError> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let mut next = vec![0.0f32; cur.len()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    let base = grid_index(dims, x, y, z) - p[axis] * stride;
                    let c = p[axis] as isize;
                    let mut acc = 0.0f64;
                    for (j, w) in kernel.iter().enumerate() {
                        let s = (c + j as isize - radius).clamp(0, n - 1) as usize;
                        acc += w * cur[base + s * stride] as f64;
                    }
                    next[grid_index(dims, x, y, z)] = acc as f32;
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Per-voxel displacement in voxels, one grid per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub dims: [usize; 3],
    pub d: [Vec<f32>; 3],
}

impl DeformationField {
    /// `G(σ) * U[−1, 1]·magnitude` per axis.
    pub fn random(
        dims: [usize; 3],
        sigma: f64,
        magnitude: f64,
        seed: u64,
    ) -> Result<Self, AugmentError> {
        if !(magnitude >= 0.0) {
            return Err(AugmentError::NonPositiveMagnitude(magnitude));
        }
        gaussian_kernel(sigma)?;
        let n: usize = dims.iter().product();
        let mut rng = rng_for(seed);
        let mut comp = || -> Result<Vec<f32>, AugmentError> {
            let raw: Vec<f32> = (0..n)
                .map(|_| (rng.gen_range(-1.0..=1.0) * magnitude) as f32)
                .collect();
            gaussian_filter_3d(&raw, dims, sigma)
        };
        let d = [comp()?, comp()?, comp()?];
        Ok(Self { dims, d })
    }

    fn source(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = grid_index(self.dims, x, y, z);
        [
            x as f32 + self.d[0][i],
            y as f32 + self.d[1][i],
            z as f32 + self.d[2][i],
        ]
    }
}

/// Trilinear sample with edge clamping.
pub fn sample_trilinear(v: &Volume, p: [f32; 3]) -> f32 {
    let dims = v.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0f32; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (dims[a] - 1) as f32);
        let l = c.floor();
        lo[a] = l as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        f[a] = c - l;
    }
    let g = |x, y, z| v.get(x, y, z);
    let c00 = g(lo[0], lo[1], lo[2]) * (1.0 - f[0]) + g(hi[0], lo[1], lo[2]) * f[0];
    let c10 = g(lo[0], hi[1], lo[2]) * (1.0 - f[0]) + g(hi[0], hi[1], lo[2]) * f[0];
    let c01 = g(lo[0], lo[1], hi[2]) * (1.0 - f[0]) + g(hi[0], lo[1], hi[2]) * f[0];
    let c11 = g(lo[0], hi[1], hi[2]) * (1.0 - f[0]) + g(hi[0], hi[1], hi[2]) * f[0];
    let c0 = c00 * (1.0 - f[1]) + c10 * f[1];
    let c1 = c01 * (1.0 - f[1]) + c11 * f[1];
    c0 * (1.0 - f[2]) + c1 * f[2]
}

fn nearest(p: [f32; 3], dims: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| p[a].round().clamp(0.0, (dims[a] - 1) as f32) as usize)
}

/// Resample a case through a coordinate map `out(p) = in(map(p))`.
fn warp_case(
    case: &MultiModalCase,
    map: impl Fn(usize, usize, usize) -> [f32; 3],
) -> Result<MultiModalCase, AugmentError> {
    let dims = case.dims();
    let mut coords = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                coords.push(map(x, y, z));
            }
        }
    }
    let warp = |v: &Volume| -> Result<Volume, AugmentError> {
        let data = coords.iter().map(|&p| sample_trilinear(v, p)).collect();
        Ok(Volume::new(dims, v.spacing(), data)?.with_name(v.name.clone()))
    };
    let m = case.modalities();
    let vols = [warp(&m[0])?, warp(&m[1])?, warp(&m[2])?, warp(&m[3])?];
    let label = match &case.label {
        None => None,
        Some(l) => {
            let labels = coords
                .iter()
                .map(|&p| {
                    let [x, y, z] = nearest(p, dims);
                    l.get(x, y, z)
                })
                .collect();
            let mut out = SegmentationMask::new(dims, labels)?;
            out.spacing = l.spacing;
            Some(out)
        }
    };
    Ok(case.with_data(vols, label)?)
}

pub fn apply_deformation(
    case: &MultiModalCase,
    field: &DeformationField,
) -> Result<MultiModalCase, AugmentError> {
    if field.dims != case.dims() {
        return Err(VolumeError::DimsMismatch(format!(
            "field {:?} vs case {:?}",
            field.dims,
            case.dims()
        ))
        .into());
    }
    warp_case(case, |x, y, z| field.source(x, y, z))
}

/// Elastic deformation: one smoothed random field shared by all modalities
/// (trilinear) and the label (nearest).
pub fn elastic_deform(
    case: &MultiModalCase,
    sigma: f64,
    magnitude: f64,
    seed: u64,
) -> Result<MultiModalCase, AugmentError> {
    let field = DeformationField::random(case.dims(), sigma, magnitude, seed)?;
    if magnitude == 0.0 {
        return Ok(case.clone());
    }
    apply_deformation(case, &field)
}

/// Rotate about the z axis through the grid centre by `degrees`.
pub fn rotate_z(case: &MultiModalCase, degrees: f64) -> Result<MultiModalCase, AugmentError> {
    if degrees == 0.0 {
        return Ok(case.clone());
    }
    let dims = case.dims();
    let (cx, cy) = ((dims[0] as f64 - 1.0) / 2.0, (dims[1] as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    warp_case(case, |x, y, z| {
        // inverse map: rotate the output coordinate by −θ
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        [
            (c * dx + s * dy + cx) as f32,
            (-s * dx + c * dy + cy) as f32,
            z as f32,
        ]
    })
}

/// Rotation by `θ ~ U[−max, max]` degrees about z.
pub fn random_rotation(
    case: &MultiModalCase,
    max_angle_deg: f64,
    seed: u64,
) -> Result<MultiModalCase, AugmentError> {
    if max_angle_deg <= 0.0 {
        return Ok(case.clone());
    }
    let theta = rng_for(seed).gen_range(-max_angle_deg..=max_angle_deg);
    rotate_z(case, theta)
}

/// Add `b ~ U[−max, max]` to every voxel of each modality (independently
/// drawn per modality).
pub fn random_brightness(
    case: &MultiModalCase,
    max_delta: f64,
    seed: u64,
) -> Result<MultiModalCase, AugmentError> {
    if max_delta <= 0.0 {
        return Ok(case.clone());
    }
    let mut rng = rng_for(seed);
    let m = case.modalities();
    let mut shift = |v: &Volume| {
        let b = rng.gen_range(-max_delta..=max_delta) as f32;
        v.map_values(|x| x + b)
    };
    let vols = [shift(&m[0]), shift(&m[1]), shift(&m[2]), shift(&m[3])];
    Ok(case.with_data(vols, case.label.clone())?)
}

/// Per-stage augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Gaussian smoothing σ drawn uniformly from this range.
    pub sigma_range: [f64; 2],
    pub magnitude: f64,
    pub max_angle_deg: f64,
    pub max_brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma_range: [10.0, 13.0],
            magnitude: 8.0,
            max_angle_deg: 15.0,
            max_brightness: 0.1,
        }
    }
}

/// Elastic deformation, rotation and brightness in sequence.
pub fn augment_case(
    case: &MultiModalCase,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<MultiModalCase, AugmentError> {
    if !cfg.enabled {
        return Ok(case.clone());
    }
    let mut rng = rng_for(seed);
    let [lo, hi] = cfg.sigma_range;
    let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let out = elastic_deform(case, sigma, cfg.magnitude, rng.gen())?;
    let out = random_rotation(&out, cfg.max_angle_deg, rng.gen())?;
    random_brightness(&out, cfg.max_brightness, rng.gen())
}

/// One of the eight axis-reflection combinations; bit 0 flips x, bit 1
/// flips y, bit 2 flips z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TtaVariant(u8);

impl TtaVariant {
    pub fn new(id: u8) -> Result<Self, AugmentError> {
        if id < 8 {
            Ok(Self(id))
        } else {
            Err(AugmentError::BadVariantId(id))
        }
    }

    pub fn all() -> impl Iterator<Item = TtaVariant> {
        (0..8).map(TtaVariant)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn flips(self) -> [bool; 3] {
        [self.0 & 1 != 0, self.0 & 2 != 0, self.0 & 4 != 0]
    }
}

/// Reflect the spatial axes of a `T×X×Y×Z×C` array.
pub fn tta_apply<T: Real>(
    arr: &NdArray<T>,
    variant: TtaVariant,
) -> Result<NdArray<T>, AugmentError> {
    let [t, nx, ny, nz, c] = arr
        .dims5()
        .map_err(|_| AugmentError::BadShape(arr.shape().to_vec()))?;
    let [fx, fy, fz] = variant.flips();
    if variant.0 == 0 {
        return Ok(arr.clone());
    }
    let mut out = NdArray::zeros(arr.shape());
    let src = arr.data();
    let dst = out.data_mut();
    for b in 0..t {
        for x in 0..nx {
            let sx = if fx { nx - 1 - x } else { x };
            for y in 0..ny {
                let sy = if fy { ny - 1 - y } else { y };
                for z in 0..nz {
                    let sz = if fz { nz - 1 - z } else { z };
                    let d = (((b * nx + x) * ny + y) * nz + z) * c;
                    let s = (((b * nx + sx) * ny + sy) * nz + sz) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    Ok(out)
}

/// Undo [`tta_apply`]; reflections are their own inverse.
pub fn tta_invert<T: Real>(
    arr: &NdArray<T>,
    variant: TtaVariant,
) -> Result<NdArray<T>, AugmentError> {
    tta_apply(arr, variant)
}
