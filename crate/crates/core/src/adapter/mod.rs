//! LoRA adapters, multi-head self-attention and a toy-scale detector.
//!
//! Everything here is small enough to train on a laptop in seconds. Forward
//! and backward passes are written by hand so analytic gradients can be
//! checked against finite differences with [`grad_check`].

mod attention;
mod detector;
mod gradcheck;
mod lora;
mod train;

pub use attention::{layer_norm, FeedForward, ToyAttentionBlock, LN_EPS};
pub use detector::{DetectorConfig, FixedTargets, HeadOutputs, LossBreakdown, SceneLoss, ToyDetector};
pub use gradcheck::{detector_grad_check, grad_check, GradCheckReport, FD_STEP};
pub use lora::LoraLayer;
pub use train::{
    generate_scenes, random_anchor, toy_train, train, write_trajectory_csv, Scene, ToyProblem, ToyTrainConfig,
    TrainOutcome, TrajectoryRow,
};

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },
    #[error("non-finite loss during gradient check (probe {index:?})")]
    NonFinite { index: Option<usize> },
    #[error(transparent)]
    Matching(#[from] crate::matching::MatchingError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub(crate) fn dim_err(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> AdapterError {
    AdapterError::Dimension { expected: expected.to_string(), got: got.to_string() }
}
