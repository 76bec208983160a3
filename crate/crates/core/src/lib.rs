//! Machine unlearning through retain-set condensation and modular training.
//!
//! Pipeline: pretrain a [`PartitionedModel`], group each class into clusters
//! ([`clustering`]), condense each cluster to one image ([`condense`]), and on
//! an unlearning request build a reduced retain set ([`collect`]) that the
//! modular online phase ([`modular`]) trains against. [`metrics`] and
//! [`baselines`] provide evaluation and reference methods; [`applications`]
//! holds the membership-inference defense and condensed-model unlearning.

pub mod applications;
pub mod baselines;
pub mod clustering;
pub mod collect;
pub mod condense;
pub mod data;
pub mod grad;
pub mod mat;
pub mod metrics;
pub mod modular;

pub use nnkit;
pub use nnkit::{ArchId, ArchSpec, PartitionedModel, Samples, Segment, SegmentMask, Tensor, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] nnkit::NnError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty {0}")]
    Empty(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
