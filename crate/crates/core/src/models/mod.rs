//! The two segmentation networks, patch-wise inference and checkpoints.

mod checkpoint;
mod sliding;
mod unet;

use std::path::PathBuf;

pub use checkpoint::{
    check_compatible, manifest_path, Checkpoint, CheckpointHeader, OptimizerHeader, TensorEntry,
    FORMAT_VERSION, MAGIC,
};
pub use sliding::{
    coverage_counts, extract_patch, patch_origins, sliding_window_predict, window_starts, PatchSpec,
};
pub use unet::{UNet, UNetConfig, Variant, FOREGROUND_PRIOR};

use crate::autodiff::{NdArray, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("spatial dims {dims:?} are not multiples of {divisor}")]
    IndivisibleDims { dims: [usize; 3], divisor: usize },
    #[error("patch {patch:?} does not fit inside volume {volume:?}")]
    PatchLargerThanVolume {
        patch: [usize; 3],
        volume: [usize; 3],
    },
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match the network: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Network output on one volume, both `1×X×Y×Z×K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: NdArray<f32>,
    pub logits: NdArray<f32>,
}

/// Anything that maps a `1×X×Y×Z×C` patch to class scores.
pub trait SegmentationModel: Sync {
    fn num_classes(&self) -> usize;

    /// Spatial dims passed to [`predict`](Self::predict) must be multiples
    /// of this.
    fn divisor(&self) -> usize;

    fn predict(&self, input: &NdArray<f32>) -> Result<Prediction, ModelError>;
}
