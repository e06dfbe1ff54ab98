//! Turning cases into network inputs and targets for both stages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::NdArray;
use crate::models::{extract_patch, Prediction};
use crate::roi::{brain_bbox, crop_case, expand_bbox, volume_bbox, BBox3};
use crate::volume::resample::{
    extract_region, paste_region, resize_grid_nearest, resize_grid_trilinear,
};
use crate::volume::{
    channel_to_grid, grid_index, load_case, DatasetManifest, MultiModalCase, NormRegion, Volume,
    NUM_CLASSES,
};

use super::config::PipelineConfig;
use super::PipelineError;

/// Seeded 80/20-style split of case indices into `(train, validation)`.
pub fn split_cases(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    let mut train = idx;
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// Load every case of a manifest (z-scored over the brain), in manifest
/// order. With `labelled_only`, cases without a label are skipped.
pub fn load_cases(
    manifest: &DatasetManifest,
    labelled_only: bool,
) -> Result<Vec<MultiModalCase>, PipelineError> {
    let ids: Vec<&str> = manifest
        .cases
        .iter()
        .filter(|c| !labelled_only || c.label.is_some())
        .map(|c| c.case_id.as_str())
        .collect();
    ids.par_iter()
        .map(|id| Ok(load_case(manifest, id, NormRegion::NonzeroOnly)?))
        .collect()
}

/// Stack x-fastest grids as channels of a `1×X×Y×Z×C` array.
fn stack_grids(grids: &[Vec<f32>], dims: [usize; 3]) -> NdArray<f32> {
    let [nx, ny, nz] = dims;
    let c = grids.len();
    let mut out = NdArray::zeros(&[1, nx, ny, nz, c]);
    let data = out.data_mut();
    for (ch, g) in grids.iter().enumerate() {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data[((x * ny + y) * nz + z) * c + ch] = g[grid_index(dims, x, y, z)];
                }
            }
        }
    }
    out
}

fn brain_box(case: &MultiModalCase) -> BBox3 {
    brain_bbox(case).unwrap_or_else(|| BBox3::full(case.dims()))
}

fn crop_box<T: Copy>(data: &[T], dims: [usize; 3], b: BBox3, fill: T) -> Vec<T> {
    extract_region(data, dims, b.lo.map(|v| v as isize), b.extent(), fill)
}

/// Binary-stage input: crop to the non-zero brain box and resize each
/// modality trilinearly to `dims`. Returns the input and the brain box.
pub fn binary_input(case: &MultiModalCase, dims: [usize; 3]) -> (NdArray<f32>, BBox3) {
    let b = brain_box(case);
    let grids: Vec<Vec<f32>> = case
        .modalities()
        .iter()
        .map(|v| resize_grid_trilinear(&crop_box(v.data(), v.dims(), b, 0.0), b.extent(), dims))
        .collect();
    (stack_grids(&grids, dims), b)
}

/// Binary-stage target: the tumor union under the same crop, resized
/// with nearest-neighbour sampling, as `1×X×Y×Z×1`.
pub fn binary_target(
    case: &MultiModalCase,
    brain: BBox3,
    dims: [usize; 3],
) -> Result<NdArray<f32>, PipelineError> {
    let label = case
        .label
        .as_ref()
        .ok_or_else(|| PipelineError::Data(format!("{} has no label", case.case_id)))?;
    let tumor = label.tumor_volume();
    let grid = resize_grid_nearest(
        &crop_box(tumor.data(), tumor.dims(), brain, 0.0),
        brain.extent(),
        dims,
    );
    Ok(stack_grids(&[grid], dims))
}

/// Map a binary-stage prediction back onto the case grid: nearest resize
/// to the brain box, zeros elsewhere.
pub fn binary_probability_volume(pred: &Prediction, case: &MultiModalCase, brain: BBox3) -> Volume {
    let [_, nx, ny, nz, _] = pred.probs.dims5().expect("rank-5 prediction");
    let small = channel_to_grid(&pred.probs, 0);
    let boxed = resize_grid_nearest(&small, [nx, ny, nz], brain.extent());
    let dims = case.dims();
    let mut full = vec![0.0f32; dims.iter().product()];
    paste_region(
        &mut full,
        dims,
        brain.lo.map(|v| v as isize),
        &boxed,
        brain.extent(),
    );
    Volume::new(
        dims,
        case.modality(crate::volume::Modality::T1).spacing(),
        full,
    )
    .expect("finite probabilities")
}

/// Crop used to train the multiclass stage: the ground-truth tumor box
/// expanded by the ROI tolerance, padded up to `roi.min_dims`.
pub fn multiclass_training_crop(
    case: &MultiModalCase,
    cfg: &PipelineConfig,
) -> Result<MultiModalCase, PipelineError> {
    let label = case
        .label
        .as_ref()
        .ok_or_else(|| PipelineError::Data(format!("{} has no label", case.case_id)))?;
    let dims = case.dims();
    let b = match volume_bbox(&label.tumor_volume(), 0.5) {
        Some(b) => expand_bbox(b, cfg.roi.tolerance, dims),
        None => brain_box(case),
    };
    Ok(crop_case(case, b, cfg.roi.min_dims)?.0)
}

/// A random `patch`-sized window of `case` as `(input, one-hot target)`.
pub fn random_patch(
    case: &MultiModalCase,
    patch: [usize; 3],
    rng: &mut impl Rng,
) -> Result<(NdArray<f32>, NdArray<f32>), PipelineError> {
    let dims = case.dims();
    if (0..3).any(|a| dims[a] < patch[a]) {
        return Err(PipelineError::Config(format!(
            "{}: grid {dims:?} is smaller than the patch {patch:?}",
            case.case_id
        )));
    }
    let origin: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=dims[a] - patch[a]));
    let label = case
        .label
        .as_ref()
        .ok_or_else(|| PipelineError::Data(format!("{} has no label", case.case_id)))?;
    Ok((
        extract_patch(&case.to_tensor(), origin, patch),
        extract_patch(&label.one_hot(NUM_CLASSES), origin, patch),
    ))
}

/// Concatenate `1×…` arrays along the leading axis.
pub fn stack_batch(items: &[NdArray<f32>]) -> Result<NdArray<f32>, PipelineError> {
    let first = items
        .first()
        .ok_or_else(|| PipelineError::Numeric("empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for it in items {
        if it.shape() != first.shape() {
            return Err(PipelineError::Numeric(format!(
                "batch items disagree: {:?} vs {:?}",
                it.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(it.data());
    }
    shape[0] = items.len() * first.shape()[0];
    Ok(NdArray::new(shape, data)?)
}
