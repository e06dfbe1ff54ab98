//! Grid resampling and region extraction for x-fastest volumes.

use crate::autodiff::kernels::{resample_axis, LinearTaps};

use super::{grid_index, SegmentationMask, Volume};

/// Trilinear resize of an x-fastest grid (half-voxel centres, clamped).
pub fn resize_grid_trilinear(data: &[f32], dims: [usize; 3], target: [usize; 3]) -> Vec<f32> {
    let mut cur = dims;
    let mut out = data.to_vec();
    // memory order is [z][y][x]
    for axis in 0..3 {
        if cur[axis] == target[axis] {
            continue;
        }
        let taps = LinearTaps::new(cur[axis], target[axis]);
        let inner: usize = cur[..axis].iter().product();
        let outer: usize = cur[axis + 1..].iter().product();
        out = resample_axis(&out, outer, cur[axis], inner, &taps);
        cur[axis] = target[axis];
    }
    out
}

/// Nearest-neighbour source index for half-voxel-centred resampling.
#[inline]
pub fn nearest_source(j: usize, n_in: usize, n_out: usize) -> usize {
    (((j as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

pub fn resize_grid_nearest<T: Copy>(data: &[T], dims: [usize; 3], target: [usize; 3]) -> Vec<T> {
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..target[a])
                .map(|j| nearest_source(j, dims[a], target[a]))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(target.iter().product());
    for z in 0..target[2] {
        for y in 0..target[1] {
            for x in 0..target[0] {
                out.push(data[grid_index(dims, maps[0][x], maps[1][y], maps[2][z])]);
            }
        }
    }
    out
}

pub fn resize_volume(v: &Volume, target: [usize; 3]) -> Volume {
    let data = resize_grid_trilinear(v.data(), v.dims(), target);
    let spacing = rescaled_spacing(v.spacing(), v.dims(), target);
    Volume::new(target, spacing, data)
        .expect("resize keeps values finite")
        .with_name(v.name.clone())
}

pub fn resize_mask(m: &SegmentationMask, target: [usize; 3]) -> SegmentationMask {
    let labels = resize_grid_nearest(m.labels(), m.dims(), target);
    let mut out = SegmentationMask::new(target, labels).expect("labels already validated");
    out.spacing = rescaled_spacing(m.spacing, m.dims(), target);
    out
}

fn rescaled_spacing(spacing: [f32; 3], from: [usize; 3], to: [usize; 3]) -> [f32; 3] {
    [0, 1, 2].map(|a| spacing[a] * from[a] as f32 / to[a] as f32)
}

/// Copy the box starting at `origin` (may be negative or overhang) with
/// extent `size`; voxels outside the source take `fill`.
pub fn extract_region<T: Copy>(
    data: &[T],
    dims: [usize; 3],
    origin: [isize; 3],
    size: [usize; 3],
    fill: T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        let sz = origin[2] + z as isize;
        for y in 0..size[1] {
            let sy = origin[1] + y as isize;
            for x in 0..size[0] {
                let sx = origin[0] + x as isize;
                let inside = sx >= 0
                    && sy >= 0
                    && sz >= 0
                    && (sx as usize) < dims[0]
                    && (sy as usize) < dims[1]
                    && (sz as usize) < dims[2];
                out.push(if inside {
                    data[grid_index(dims, sx as usize, sy as usize, sz as usize)]
                } else {
                    fill
                });
            }
        }
    }
    out
}

/// Write `src` (extent `size`) into `dst` at `origin`, skipping voxels that
/// fall outside `dst`.
pub fn paste_region<T: Copy>(
    dst: &mut [T],
    dims: [usize; 3],
    origin: [isize; 3],
    src: &[T],
    size: [usize; 3],
) {
    for z in 0..size[2] {
        let dz = origin[2] + z as isize;
        if dz < 0 || dz as usize >= dims[2] {
            continue;
        }
        for y in 0..size[1] {
            let dy = origin[1] + y as isize;
            if dy < 0 || dy as usize >= dims[1] {
                continue;
            }
            for x in 0..size[0] {
                let dx = origin[0] + x as isize;
                if dx < 0 || dx as usize >= dims[0] {
                    continue;
                }
                dst[grid_index(dims, dx as usize, dy as usize, dz as usize)] =
                    src[grid_index(size, x, y, z)];
            }
        }
    }
}
