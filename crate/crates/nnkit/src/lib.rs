//! Small feed-forward network toolkit with hand-written backprop.
//!
//! Models are split into three ordered segments (beginning, intermediate,
//! final). Training can be scoped to any subset of segments; frozen segments
//! run in inference mode and their parameters are never written.

pub mod arch;
pub mod data;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod sequential;
pub mod snapshot;
pub mod train;

use ndarray::ArrayD;

pub use arch::{build_head, build_model, ArchId, ArchSpec, HeadArch};
pub use data::Samples;
pub use layers::{Layer, Param, ParamKind};
pub use loss::{CrossEntropy, Distill, Mse, Objective};
pub use model::{FeatureTap, PartitionedModel, Segment, SegmentMask};
pub use optim::Adam;
pub use sequential::Sequential;
pub use snapshot::Snapshot;
pub use train::{train_segments, train_segments_with, EpochRecord, TrainConfig, TrainHooks, TrainLog};

/// Dense tensor type used throughout: row-major `f64` of dynamic rank.
pub type Tensor = ArrayD<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("architecture {arch} cannot take input {input:?}: {reason}")]
    ArchInput {
        arch: String,
        input: Vec<usize>,
        reason: String,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("empty data stream")]
    EmptyData,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
