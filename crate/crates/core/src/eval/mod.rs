//! Metrics, checkpoints, inference and ablation runs.

mod ablation;
mod checkpoint;
mod pearson;

pub use ablation::{run_ablation, AblationCell, AblationPlan, AblationRow, AblationTable, CorruptedScores, EvalCorruption, WeightShift};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, StageTag, CHECKPOINT_VERSION};
pub use pearson::{pearson, PearsonAccumulator, PearsonReport};

use thiserror::Error;

use crate::align::FrozenEncoders;
use crate::corpus::{CorpusError, SampleBundle, NUM_EMOTIONS};
use crate::fusion::{encode_corpus, EncodedSample, FusionError, FusionModel};
use crate::params::ParamStore;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/target length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two samples for a correlation, got {0}")]
    TooFewSamples(usize),
    #[error("correlation is undefined for a constant sequence")]
    UndefinedCorrelation,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid ablation plan: {0}")]
    Plan(String),
}

/// Samples per forward pass at inference.
pub const PREDICT_CHUNK: usize = 32;

/// Frozen encoders plus a fusion model and the weights used for inference.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub encoders: FrozenEncoders,
    pub model: FusionModel,
    pub params: ParamStore,
}

impl Predictor {
    pub fn new(encoders: FrozenEncoders, model: FusionModel, params: ParamStore) -> Result<Self, EvalError> {
        model.check_params(&params)?;
        Ok(Self {
            encoders,
            model,
            params,
        })
    }

    pub fn encode(&self, samples: &[SampleBundle]) -> Result<Vec<EncodedSample>, EvalError> {
        Ok(encode_corpus(&self.encoders, samples)?)
    }

    pub fn predict(&self, samples: &[SampleBundle]) -> Result<Vec<[f64; NUM_EMOTIONS]>, EvalError> {
        let encoded = self.encode(samples)?;
        Ok(self.model.predict(&self.params, &encoded, PREDICT_CHUNK)?)
    }

    pub fn evaluate(&self, samples: &[SampleBundle]) -> Result<PearsonReport, EvalError> {
        let preds = self.predict(samples)?;
        let targets: Vec<_> = samples.iter().map(|s| s.target).collect();
        PearsonReport::from_predictions(&targets, &preds)
    }
}
