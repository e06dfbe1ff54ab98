//! Tumor region-of-interest extraction: bounding box of a binary mask,
//! tolerance expansion, crop with minimum-size padding, and restoration of
//! cropped predictions to the original grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::NdArray;
use crate::volume::{grid_index, MultiModalCase, SegmentationMask, Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum RoiError {
    #[error("bounding box {0:?} is empty or outside the volume")]
    EmptyBox(BBox3),
    #[error("crop record does not match: {0}")]
    RecordMismatch(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Axis-aligned box with inclusive voxel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox3 {
    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: dims.map(|d| d.saturating_sub(1)),
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] + 1 - self.lo[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    fn is_valid_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < dims[a])
    }
}

/// Tightest box around voxels strictly above `threshold`, `None` if there
/// are none.
pub fn mask_bbox(values: &[f32], dims: [usize; 3], threshold: f32) -> Option<BBox3> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let row = grid_index(dims, 0, y, z);
            for (x, &v) in values[row..row + dims[0]].iter().enumerate() {
                if v > threshold {
                    any = true;
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    any.then_some(BBox3 { lo, hi })
}

pub fn volume_bbox(v: &Volume, threshold: f32) -> Option<BBox3> {
    mask_bbox(v.data(), v.dims(), threshold)
}

/// Box around voxels where any modality is non-zero.
pub fn brain_bbox(case: &MultiModalCase) -> Option<BBox3> {
    let dims = case.dims();
    let any: Vec<f32> = (0..dims.iter().product())
        .map(|i| {
            if case.modalities().iter().any(|m| m.data()[i] != 0.0) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    mask_bbox(&any, dims, 0.5)
}

/// Move every face outward by `tolerance` voxels, clipped to the grid.
pub fn expand_bbox(b: BBox3, tolerance: usize, dims: [usize; 3]) -> BBox3 {
    BBox3 {
        lo: b.lo.map(|l| l.saturating_sub(tolerance)),
        hi: [0, 1, 2].map(|a| (b.hi[a] + tolerance).min(dims[a] - 1)),
    }
}

/// Everything needed to map a cropped grid back onto the original.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub original_dims: [usize; 3],
    /// Source voxels copied into the crop.
    pub bbox: BBox3,
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
    pub cropped_dims: [usize; 3],
}

impl CropRecord {
    /// Source coordinate of cropped voxel `(0, 0, 0)`.
    pub fn origin(&self) -> [isize; 3] {
        [0, 1, 2].map(|a| self.bbox.lo[a] as isize - self.pad_lo[a] as isize)
    }

    pub fn identity(dims: [usize; 3]) -> Self {
        Self {
            original_dims: dims,
            bbox: BBox3::full(dims),
            pad_lo: [0; 3],
            pad_hi: [0; 3],
            cropped_dims: dims,
        }
    }

    fn check(&self, dims: [usize; 3]) -> Result<(), RoiError> {
        if dims != self.cropped_dims {
            return Err(RoiError::RecordMismatch(format!(
                "grid {dims:?} but record expects {:?}",
                self.cropped_dims
            )));
        }
        Ok(())
    }
}

/// Plan the crop: x and y follow the box, z is a window of exactly
/// `min_dims[2]` voxels centred on the box; short axes are zero-padded
/// symmetrically with the odd voxel on the high side.
pub fn plan_crop(
    bbox: BBox3,
    dims: [usize; 3],
    min_dims: [usize; 3],
) -> Result<CropRecord, RoiError> {
    if !bbox.is_valid_in(dims) || min_dims.contains(&0) {
        return Err(RoiError::EmptyBox(bbox));
    }
    let mut applied = bbox;
    let depth = min_dims[2];
    if dims[2] >= depth {
        let centre = (bbox.lo[2] + bbox.hi[2]) / 2;
        let start = centre.saturating_sub(depth / 2).min(dims[2] - depth);
        applied.lo[2] = start;
        applied.hi[2] = start + depth - 1;
    } else {
        applied.lo[2] = 0;
        applied.hi[2] = dims[2] - 1;
    }
    let extent = applied.extent();
    let mut pad_lo = [0; 3];
    let mut pad_hi = [0; 3];
    for a in 0..3 {
        if extent[a] < min_dims[a] {
            let total = min_dims[a] - extent[a];
            pad_lo[a] = total / 2;
            pad_hi[a] = total - pad_lo[a];
        }
    }
    Ok(CropRecord {
        original_dims: dims,
        bbox: applied,
        pad_lo,
        pad_hi,
        cropped_dims: [0, 1, 2].map(|a| extent[a] + pad_lo[a] + pad_hi[a]),
    })
}

/// Visit `(source index, cropped index)` for every voxel of the box.
fn for_each_box_voxel(record: &CropRecord, mut f: impl FnMut(usize, usize)) {
    let (b, d) = (&record.bbox, record.cropped_dims);
    for z in b.lo[2]..=b.hi[2] {
        for y in b.lo[1]..=b.hi[1] {
            for x in b.lo[0]..=b.hi[0] {
                let c = [x, y, z];
                let local: [usize; 3] = std::array::from_fn(|a| c[a] - b.lo[a] + record.pad_lo[a]);
                f(
                    grid_index(record.original_dims, x, y, z),
                    grid_index(d, local[0], local[1], local[2]),
                );
            }
        }
    }
}

/// Apply a crop record to any x-fastest grid: the box is copied and the
/// padding takes `fill`.
pub fn crop_grid<T: Copy>(data: &[T], record: &CropRecord, fill: T) -> Vec<T> {
    let mut out = vec![fill; record.cropped_dims.iter().product()];
    for_each_box_voxel(record, |src, dst| out[dst] = data[src]);
    out
}

pub fn crop_volume(v: &Volume, record: &CropRecord) -> Result<Volume, RoiError> {
    if v.dims() != record.original_dims {
        return Err(RoiError::RecordMismatch(format!(
            "volume {:?} vs record {:?}",
            v.dims(),
            record.original_dims
        )));
    }
    Ok(Volume::new(
        record.cropped_dims,
        v.spacing(),
        crop_grid(v.data(), record, 0.0),
    )?
    .with_name(v.name.clone()))
}

pub fn crop_mask(m: &SegmentationMask, record: &CropRecord) -> Result<SegmentationMask, RoiError> {
    if m.dims() != record.original_dims {
        return Err(RoiError::RecordMismatch(format!(
            "mask {:?} vs record {:?}",
            m.dims(),
            record.original_dims
        )));
    }
    let mut out = SegmentationMask::new(record.cropped_dims, crop_grid(m.labels(), record, 0))?;
    out.spacing = m.spacing;
    Ok(out)
}

/// Crop all modalities (and the label, if present) to the planned region.
pub fn crop_case(
    case: &MultiModalCase,
    bbox: BBox3,
    min_dims: [usize; 3],
) -> Result<(MultiModalCase, CropRecord), RoiError> {
    let record = plan_crop(bbox, case.dims(), min_dims)?;
    let cropped = apply_crop(case, &record)?;
    Ok((cropped, record))
}

pub fn apply_crop(case: &MultiModalCase, record: &CropRecord) -> Result<MultiModalCase, RoiError> {
    let m = case.modalities();
    let vols = [
        crop_volume(&m[0], record)?,
        crop_volume(&m[1], record)?,
        crop_volume(&m[2], record)?,
        crop_volume(&m[3], record)?,
    ];
    let label = case
        .label
        .as_ref()
        .map(|l| crop_mask(l, record))
        .transpose()?;
    Ok(case.with_data(vols, label)?)
}

/// Place a cropped grid back at its source location; everything outside
/// the crop takes `fill` and padded voxels are dropped.
pub fn restore_grid<T: Copy>(data: &[T], record: &CropRecord, fill: T) -> Result<Vec<T>, RoiError> {
    let n: usize = record.cropped_dims.iter().product();
    if data.len() != n {
        return Err(RoiError::RecordMismatch(format!(
            "{} voxels for a {:?} crop",
            data.len(),
            record.cropped_dims
        )));
    }
    let mut out = vec![fill; record.original_dims.iter().product()];
    for_each_box_voxel(record, |src, dst| out[src] = data[dst]);
    Ok(out)
}

pub fn restore_mask(
    mask: &SegmentationMask,
    record: &CropRecord,
) -> Result<SegmentationMask, RoiError> {
    record.check(mask.dims())?;
    Ok(SegmentationMask::new(
        record.original_dims,
        restore_grid(mask.labels(), record, 0)?,
    )?)
}

/// Restore a `1×X×Y×Z×K` probability map; outside voxels become certain
/// background (class 0 probability 1).
pub fn restore_probabilities(
    probs: &NdArray<f32>,
    record: &CropRecord,
) -> Result<NdArray<f32>, RoiError> {
    let [t, cx, cy, cz, k] = probs
        .dims5()
        .map_err(|e| RoiError::RecordMismatch(e.to_string()))?;
    if t != 1 {
        return Err(RoiError::RecordMismatch(format!(
            "batch of {t} predictions"
        )));
    }
    record.check([cx, cy, cz])?;
    let [nx, ny, nz] = record.original_dims;
    let mut out = NdArray::zeros(&[1, nx, ny, nz, k]);
    let data = out.data_mut();
    for v in data.chunks_exact_mut(k) {
        v[0] = 1.0;
    }
    let o = record.origin();
    for x in 0..cx {
        let sx = o[0] + x as isize;
        for y in 0..cy {
            let sy = o[1] + y as isize;
            for z in 0..cz {
                let sz = o[2] + z as isize;
                if sx < 0
                    || sy < 0
                    || sz < 0
                    || sx as usize >= nx
                    || sy as usize >= ny
                    || sz as usize >= nz
                {
                    continue;
                }
                let src = ((x * cy + y) * cz + z) * k;
                let dst = (((sx as usize) * ny + sy as usize) * nz + sz as usize) * k;
                data[dst..dst + k].copy_from_slice(&probs.data()[src..src + k]);
            }
        }
    }
    Ok(out)
}

/// Outcome of turning a binary-stage prediction into a crop box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiSelection {
    pub bbox: BBox3,
    /// True when the mask was empty and the brain box was used instead.
    pub fell_back: bool,
}

/// Threshold, box and expand a binary probability volume; an empty mask
/// falls back to the non-zero brain box with a warning.
pub fn select_roi(
    binary: &Volume,
    case: &MultiModalCase,
    threshold: f32,
    tolerance: usize,
) -> RoiSelection {
    match volume_bbox(binary, threshold) {
        Some(b) => RoiSelection {
            bbox: expand_bbox(b, tolerance, binary.dims()),
            fell_back: false,
        },
        None => {
            log::warn!(
                "{}: binary stage found no tumor, using the brain bounding box",
                case.case_id
            );
            RoiSelection {
                bbox: brain_bbox(case).unwrap_or_else(|| BBox3::full(case.dims())),
                fell_back: true,
            }
        }
    }
}
