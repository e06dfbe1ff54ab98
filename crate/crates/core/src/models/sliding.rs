//! Patch-wise inference over volumes larger than the network input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::NdArray;

use super::{ModelError, Prediction, SegmentationModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch: [usize; 3],
    /// Voxels shared by neighbouring patches along each axis.
    pub overlap: [usize; 3],
}

impl PatchSpec {
    pub fn new(patch: [usize; 3], overlap: [usize; 3]) -> Self {
        Self { patch, overlap }
    }

    /// Half-patch overlap.
    pub fn half_overlap(patch: [usize; 3]) -> Self {
        Self {
            patch,
            overlap: patch.map(|p| p / 2),
        }
    }

    fn stride(&self, axis: usize) -> usize {
        (self.patch[axis] - self.overlap[axis].min(self.patch[axis] - 1)).max(1)
    }
}

/// Patch origins along one axis: regular steps plus a final patch flush
/// with the far edge.
pub fn window_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = n - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("non-empty") != last {
        starts.push(last);
    }
    starts
}

/// All patch origins for a grid.
pub fn patch_origins(dims: [usize; 3], spec: &PatchSpec) -> Result<Vec<[usize; 3]>, ModelError> {
    if (0..3).any(|a| spec.patch[a] == 0 || spec.patch[a] > dims[a]) {
        return Err(ModelError::PatchLargerThanVolume {
            patch: spec.patch,
            volume: dims,
        });
    }
    let s: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(dims[a], spec.patch[a], spec.stride(a)))
        .collect();
    let mut out = Vec::new();
    for &x in &s[0] {
        for &y in &s[1] {
            for &z in &s[2] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// How many patches cover each voxel (x-major, matching tensor layout).
pub fn coverage_counts(dims: [usize; 3], spec: &PatchSpec) -> Result<Vec<u32>, ModelError> {
    let mut counts = vec![0u32; dims.iter().product()];
    for o in patch_origins(dims, spec)? {
        for x in o[0]..o[0] + spec.patch[0] {
            for y in o[1]..o[1] + spec.patch[1] {
                for z in o[2]..o[2] + spec.patch[2] {
                    counts[(x * dims[1] + y) * dims[2] + z] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Copy a spatial box out of a `1×X×Y×Z×C` array.
pub fn extract_patch(input: &NdArray<f32>, origin: [usize; 3], size: [usize; 3]) -> NdArray<f32> {
    let [_, _, ny, nz, c] = input.dims5().expect("rank-5 input");
    let mut out = NdArray::zeros(&[1, size[0], size[1], size[2], c]);
    let dst = out.data_mut();
    let row = size[2] * c;
    for x in 0..size[0] {
        for y in 0..size[1] {
            let s = (((origin[0] + x) * ny + origin[1] + y) * nz + origin[2]) * c;
            let d = (x * size[1] + y) * row;
            dst[d..d + row].copy_from_slice(&input.data()[s..s + row]);
        }
    }
    out
}

fn accumulate(
    acc: &mut [f32],
    dims: [usize; 3],
    k: usize,
    patch: &NdArray<f32>,
    origin: [usize; 3],
    size: [usize; 3],
) {
    let row = size[2] * k;
    for x in 0..size[0] {
        for y in 0..size[1] {
            let d = (((origin[0] + x) * dims[1] + origin[1] + y) * dims[2] + origin[2]) * k;
            let s = (x * size[1] + y) * row;
            for (a, &b) in acc[d..d + row].iter_mut().zip(&patch.data()[s..s + row]) {
                *a += b;
            }
        }
    }
}

/// Tile the volume, predict every patch and average overlapping outputs
/// uniformly. Patches run in parallel; accumulation order is fixed.
pub fn sliding_window_predict(
    model: &dyn SegmentationModel,
    input: &NdArray<f32>,
    spec: &PatchSpec,
) -> Result<Prediction, ModelError> {
    let [t, nx, ny, nz, _] = input.dims5()?;
    if t != 1 {
        return Err(ModelError::InvalidConfig(format!(
            "sliding window takes one volume, got {t}"
        )));
    }
    let dims = [nx, ny, nz];
    let origins = patch_origins(dims, spec)?;
    let preds: Vec<Prediction> = origins
        .par_iter()
        .map(|&o| model.predict(&extract_patch(input, o, spec.patch)))
        .collect::<Result<_, _>>()?;
    let k = model.num_classes();
    let n = nx * ny * nz;
    let mut probs = vec![0.0f32; n * k];
    let mut logits = vec![0.0f32; n * k];
    for (o, p) in origins.iter().zip(&preds) {
        accumulate(&mut probs, dims, k, &p.probs, *o, spec.patch);
        accumulate(&mut logits, dims, k, &p.logits, *o, spec.patch);
    }
    let counts = coverage_counts(dims, spec)?;
    for (i, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f32;
        for j in 0..k {
            probs[i * k + j] *= inv;
            logits[i * k + j] *= inv;
        }
    }
    let shape = vec![1, nx, ny, nz, k];
    Ok(Prediction {
        probs: NdArray::new(shape.clone(), probs)?,
        logits: NdArray::new(shape, logits)?,
    })
}
