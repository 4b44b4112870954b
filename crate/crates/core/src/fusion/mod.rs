//! Stage II: temporal encoders, temporal feature enhancement, quality-aware
//! fusion and the Transformer regression head.

mod lstm;
mod mlp;
mod model;
mod qam;
mod tcn;
mod tfe;
mod transformer;

pub use lstm::{bilstm_forward, BiLstm, FORGET_BIAS};
pub use mlp::{modality_map, Mlp};
pub use model::{encode_corpus, EncodedBatch, EncodedSample, FusionConfig, FusionForward, FusionModel};
pub use qam::{quality_weights, QualityModule, QualityWeights};
pub use tcn::{tcn_forward, TcnStack};
pub use tfe::{difference_matrix, gated_attention, segment_pool, DifferenceGate, SegmentPlan};
pub use transformer::{positional_encoding, EncoderLayer};

use thiserror::Error;

use crate::params::ParamError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("cannot split {frames} frames into {segments} segments")]
    InvalidSegments { segments: usize, frames: usize },
    #[error("batch mixes sequence lengths {0} and {1}")]
    RaggedBatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}
