//! Volumetric data: single-channel grids, multi-modal cases, label masks
//! and the readers/writers for them.

mod manifest;
mod nifti;
mod normalize;
mod raw;
pub mod resample;

use std::path::Path;

pub use manifest::{load_case, read_volume, CaseEntry, DatasetManifest, LabelEncoding};
pub use nifti::{read_nifti, write_nifti};
pub use normalize::{zscore_normalize, NormRegion, Normalized};
pub use raw::{read_raw, sidecar_path, write_raw, RawSidecar};

use crate::autodiff::NdArray;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensions {0:?}")]
    UnsupportedDims(Vec<i64>),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("non-finite voxel value at index {0}")]
    NonFiniteVoxel(usize),
    #[error("cannot parse sidecar: {0}")]
    SidecarParse(String),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("case {case} is missing modality {modality}")]
    MissingModality { case: String, modality: String },
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),
    #[error("label value {0} is not in the declared label encoding")]
    UnknownLabelValue(f32),
    #[error("case {0:?} not found in manifest")]
    UnknownCase(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

impl VolumeError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::IoFailure {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One 3D scalar grid, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
    pub name: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::DimsMismatch(format!(
                "zero extent in {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(VolumeError::LengthMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteVoxel(i));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            name: String::new(),
        })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.iter().product()],
            name: String::new(),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        grid_index(self.dims, x, y, z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Build a volume with the same geometry and new values.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
            name: self.name.clone(),
        }
    }

    pub(crate) fn replace_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data,
            name: self.name.clone(),
        }
    }
}

#[inline]
pub fn grid_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Integer voxel labels: 0 background, 1 necrotic/non-enhancing core,
/// 2 edema, 3 enhancing tumor.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    dims: [usize; 3],
    pub spacing: [f32; 3],
    labels: Vec<u8>,
}

pub const NUM_CLASSES: usize = 4;

impl SegmentationMask {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self, VolumeError> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(VolumeError::LengthMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(VolumeError::UnknownLabelValue(bad as f32));
        }
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            labels,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            labels: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[grid_index(self.dims, x, y, z)]
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.labels.iter().map(|&l| l as f32).collect(),
            name: String::new(),
        }
    }

    /// Union of all tumor labels as a 0/1 volume.
    pub fn tumor_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .labels
                .iter()
                .map(|&l| if l > 0 { 1.0 } else { 0.0 })
                .collect(),
            name: String::new(),
        }
    }

    /// `1×X×Y×Z×K` one-hot encoding.
    pub fn one_hot(&self, classes: usize) -> NdArray<f32> {
        let [nx, ny, nz] = self.dims;
        let mut out = NdArray::zeros(&[1, nx, ny, nz, classes]);
        let data = out.data_mut();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let l = self.get(x, y, z) as usize;
                    let cls = if classes == 1 { 0 } else { l };
                    let hot = classes > 1 || l > 0;
                    if hot {
                        data[((x * ny + y) * nz + z) * classes + cls] = 1.0;
                    }
                }
            }
        }
        out
    }
}

/// The four MRI contrasts, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    T1Gd,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1Gd, Modality::T2, Modality::Flair];

    pub fn key(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1Gd => "t1gd",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

/// Four co-registered modality volumes and an optional label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalCase {
    pub case_id: String,
    modalities: [Volume; 4],
    pub label: Option<SegmentationMask>,
}

impl MultiModalCase {
    pub fn new(
        case_id: impl Into<String>,
        modalities: [Volume; 4],
        label: Option<SegmentationMask>,
    ) -> Result<Self, VolumeError> {
        let case_id = case_id.into();
        let dims = modalities[0].dims();
        let spacing = modalities[0].spacing();
        for (m, v) in Modality::ALL.iter().zip(&modalities) {
            if v.dims() != dims {
                return Err(VolumeError::DimsMismatch(format!(
                    "{case_id}: {} has dims {:?}, t1 has {dims:?}",
                    m.key(),
                    v.dims()
                )));
            }
            if v.spacing() != spacing {
                return Err(VolumeError::DimsMismatch(format!(
                    "{case_id}: {} spacing {:?} differs from t1 {spacing:?}",
                    m.key(),
                    v.spacing()
                )));
            }
        }
        if let Some(l) = &label {
            if l.dims() != dims {
                return Err(VolumeError::DimsMismatch(format!(
                    "{case_id}: label dims {:?} vs image dims {dims:?}",
                    l.dims()
                )));
            }
        }
        Ok(Self {
            case_id,
            modalities,
            label,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims()
    }

    pub fn modality(&self, m: Modality) -> &Volume {
        &self.modalities[m as usize]
    }

    pub fn modalities(&self) -> &[Volume; 4] {
        &self.modalities
    }

    /// Replace the images (and optionally the label) keeping the case id.
    pub fn with_data(
        &self,
        modalities: [Volume; 4],
        label: Option<SegmentationMask>,
    ) -> Result<Self, VolumeError> {
        Self::new(self.case_id.clone(), modalities, label)
    }

    /// Stack the modalities into a `1×X×Y×Z×4` network input.
    pub fn to_tensor(&self) -> NdArray<f32> {
        let [nx, ny, nz] = self.dims();
        let mut out = NdArray::zeros(&[1, nx, ny, nz, 4]);
        let data = out.data_mut();
        for (c, vol) in self.modalities.iter().enumerate() {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        data[((x * ny + y) * nz + z) * 4 + c] = vol.get(x, y, z);
                    }
                }
            }
        }
        out
    }
}

/// Split channel `c` of a `1×X×Y×Z×C` array into an x-fastest grid.
pub fn channel_to_grid(arr: &NdArray<f32>, c: usize) -> Vec<f32> {
    let [_, nx, ny, nz, ch] = arr.dims5().expect("rank-5 array");
    let mut out = vec![0.0; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                out[grid_index([nx, ny, nz], x, y, z)] =
                    arr.data()[((x * ny + y) * nz + z) * ch + c];
            }
        }
    }
    out
}

/// Per-voxel argmax over channels as a label mask (`1×X×Y×Z×K` input).
pub fn argmax_mask(probs: &NdArray<f32>) -> SegmentationMask {
    let [_, nx, ny, nz, k] = probs.dims5().expect("rank-5 array");
    let mut labels = vec![0u8; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let base = ((x * ny + y) * nz + z) * k;
                let v = &probs.data()[base..base + k];
                let mut best = 0;
                for c in 1..k {
                    if v[c] > v[best] {
                        best = c;
                    }
                }
                labels[grid_index([nx, ny, nz], x, y, z)] = best as u8;
            }
        }
    }
    SegmentationMask {
        dims: [nx, ny, nz],
        spacing: [1.0; 3],
        labels,
    }
}
