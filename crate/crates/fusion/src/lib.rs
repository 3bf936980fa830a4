//! A desk-scale multimodal fusion regressor.
//!
//! Feature streams (text embeddings and visual rows) are projected into the
//! embedding space of a small transformer and fused with the prompt bytes as
//! virtual tokens. The backbone is frozen or adapted with LoRA; projectors,
//! pooling and an MLP head are trained with a composite MAE/correlation
//! loss. Everything runs on a small f64 reverse-mode tape.

pub mod config;
pub mod model;
pub mod tape;
pub mod train;

pub use config::{tokenize, FusionConfig, Pooling, PromptKind, TrainMode};
pub use model::{FusionInput, FusionModel, StreamDims};
pub use train::{check_gradients, train_fusion, train_model, FusionRun};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("fused sequence of {len} positions exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("stream mismatch: {0}")]
    StreamMismatch(String),
    #[error("batch of {n} is too small; the loss needs at least 2 examples")]
    BatchTooSmall { n: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("gradient check failed for {param}: relative error {rel_error:e}")]
    GradCheckFailure { param: String, rel_error: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has no LoRA adapters")]
    NotLoraModel,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metric error: {0}")]
    Metric(String),
}
