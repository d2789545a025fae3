//! Low-rank adaptation of the two frozen CLIP projection heads.
//!
//! The effective projection is `W' = W + (alpha / r) * B A`. Only `A` and
//! `B` train; `W` never changes. Forward and backward passes run in `f64`
//! over `f32` storage, and the gradient of the symmetric contrastive loss is
//! derived by hand (no autodiff framework).

mod adapter;
mod grad;
mod io;
mod loss;
mod train;

pub use adapter::{
    init_adapter, merge, project, project_frozen, project_matrix, DropoutMode, HeadKind, LoraAdapter, LoraConfig,
    ProjectionHead,
};
pub use grad::{batch_loss, batch_loss_and_grad, grad, AdapterParams, Gradients, HeadParams, TrainBatch};
pub use io::{
    load_adapter, read_adapter, save_adapter, write_adapter, AdapterFile, AdapterFormatError, ADAPTER_MAGIC,
    ADAPTER_VERSION,
};
pub use loss::{contrastive_loss, l2_normalize};
pub use train::{train, FeatureStore, Optimizer, TrainConfig, TrainOutcome, DEFAULT_LOGIT_SCALE};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoraError {
    #[error("rank {rank} exceeds min(d_in = {d_in}, d_out = {d_out})")]
    RankTooLarge { rank: usize, d_in: usize, d_out: usize },
    #[error("rank must be positive")]
    ZeroRank,
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f32),
    #[error("dropout must lie in [0, 1), got {0}")]
    InvalidDropout(f32),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },
    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("need at least {needed} pairs, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no feature row for pair {0:?}")]
    MissingFeatures(String),
}
