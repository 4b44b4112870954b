//! Synthetic trimodal corpus: aligned visual/audio/text feature streams with
//! a known latent intensity trajectory, controllable corruption, the EMIF
//! on-disk format and Stage-I annotation records.

mod annotation;
mod corrupt;
mod format;
mod generate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotation::{
    annotate, au_name, read_annotations, render_prompt, write_annotations, ActionUnit, AnnotationRecord,
    ExpressionClass, IntensityLevel,
};
pub use corrupt::{corrupt, degrade_random};
pub(crate) use annotation::fnv1a;
pub use format::{read_features, write_features, EMIF_MAGIC, EMIF_VERSION};
pub use generate::{align_audio_windows, generate_corpus, CorpusConfig, NoiseLevels, UNRELIABLE_SCALE};

use crate::tensor::Tensor;

/// Number of emotion dimensions scored per sample.
pub const NUM_EMOTIONS: usize = 6;

pub const EMOTION_NAMES: [&str; NUM_EMOTIONS] = [
    "Admiration",
    "Amusement",
    "Determination",
    "Empathic Pain",
    "Excitement",
    "Joy",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("frame span [{start}, {end}) outside [0, {len})")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("bad magic: expected \"EMIF\"")]
    BadMagic,
    #[error("version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("annotation must list at least one action unit")]
    EmptyActionUnits,
    #[error("annotation line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];

    pub(crate) fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Per-frame features of one modality of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    /// `[T×D]`, row per frame.
    pub frames: Tensor,
    pub frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    OcclusionMask,
    DropoutFrames,
}

impl CorruptionKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            CorruptionKind::GaussianNoise => 0,
            CorruptionKind::OcclusionMask => 1,
            CorruptionKind::DropoutFrames => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CorruptionKind::GaussianNoise),
            1 => Some(CorruptionKind::OcclusionMask),
            2 => Some(CorruptionKind::DropoutFrames),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub modality: Modality,
    pub kind: CorruptionKind,
    /// In `[0, 1]`; zero leaves the sample untouched.
    pub strength: f64,
    /// Half-open frame range; `None` means the whole sequence.
    pub frame_span: Option<(usize, usize)>,
}

/// One aligned trimodal sample with its six intensity targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub id: String,
    pub visual: FeatureSequence,
    pub audio: FeatureSequence,
    pub text: FeatureSequence,
    pub target: [f64; NUM_EMOTIONS],
    /// Corruptions applied so far, in order.
    pub corruption: Vec<CorruptionSpec>,
}

impl SampleBundle {
    pub fn modality(&self, m: Modality) -> &FeatureSequence {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut FeatureSequence {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Audio => &mut self.audio,
            Modality::Text => &mut self.text,
        }
    }

    pub fn frames(&self) -> usize {
        self.visual.len()
    }

    /// Checks alignment and target range.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.visual.len() != self.audio.len() {
            return Err(CorpusError::InvalidHeader(format!(
                "sample {}: visual has {} frames, audio {}",
                self.id,
                self.visual.len(),
                self.audio.len()
            )));
        }
        if self.text.len() != 1 {
            return Err(CorpusError::InvalidHeader(format!(
                "sample {}: text must hold one utterance vector, got {}",
                self.id,
                self.text.len()
            )));
        }
        if self.target.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CorpusError::InvalidHeader(format!(
                "sample {}: target outside [0,1]",
                self.id
            )));
        }
        Ok(())
    }
}

/// Rounds through `f32` so the value survives the on-disk format exactly.
pub(crate) fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}
