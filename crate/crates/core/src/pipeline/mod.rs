//! End-to-end orchestration: phantoms, two-stage training, prediction,
//! evaluation and reporting.

mod config;
mod data;
mod evaluate;
pub mod gradcheck;
mod phantom;
mod predict;
mod run;
mod train;

pub use config::{PipelineConfig, RoiConfig, Scale, StageConfig, TABLE_ONE};
pub use data::{
    binary_input, binary_probability_volume, binary_target, load_cases, multiclass_training_crop,
    random_patch, split_cases, stack_batch,
};
pub use evaluate::{
    evaluate, evaluate_cases, percentile_indices, percentile_report, read_prediction,
    write_confidence_png, write_prediction, EvaluationReport, PERCENTILES,
};
pub use phantom::{
    generate_case, normalize_case, phantom_cases, phantom_generate, IntensityProfile, PhantomSpec,
};
pub use predict::{CasePrediction, Segmenter};
pub use run::{run_experiment, ExperimentOutcome};
pub use train::{train_binary, train_multiclass, EpochRecord, Stage, TrainOutcome};

use crate::augment::AugmentError;
use crate::autodiff::TensorError;
use crate::metrics::GridMismatch;
use crate::models::ModelError;
use crate::optim::OptimError;
use crate::roi::RoiError;
use crate::uncertainty::UncertaintyError;
use crate::volume::VolumeError;

/// Failure classes, each with a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn data(e: impl std::fmt::Display) -> Self {
        Self::Data(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Data(_) => "data",
            Self::Numeric(_) => "numeric",
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::IndivisibleDims { .. }
            | ModelError::InvalidConfig(_)
            | ModelError::PatchLargerThanVolume { .. } => Self::Config(e.to_string()),
            ModelError::Tensor(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<OptimError> for PipelineError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::BadHyperparameter(_) => Self::Config(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

impl From<UncertaintyError> for PipelineError {
    fn from(e: UncertaintyError) -> Self {
        match e {
            UncertaintyError::Model(m) => m.into(),
            other => Self::Numeric(other.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                Self::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(
    VolumeError,
    RoiError,
    AugmentError,
    GridMismatch,
    std::io::Error
);
