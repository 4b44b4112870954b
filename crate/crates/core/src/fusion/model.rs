use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lstm::BiLstm;
use super::mlp::Mlp;
use super::qam::{modality_key, QualityModule, QualityWeights};
use super::tcn::TcnStack;
use super::tfe::{DifferenceGate, SegmentPlan};
use super::transformer::{positional_encoding, EncoderLayer};
use super::FusionError;
use crate::align::FrozenEncoders;
use crate::autograd::{Tape, Var};
use crate::config::{Config, FusionMode, ModalitySet};
use crate::corpus::{Modality, SampleBundle, NUM_EMOTIONS};
use crate::params::{init_linear, linear, Binding, ParamStore};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, FusionError>;

/// Architecture of the Stage-II model.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Width of the per-frame visual and audio inputs (the encoder embedding).
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Width of the per-sample text vector.
    pub text_dim: usize,
    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub tcn_channels: usize,
    pub lstm_hidden: usize,
    pub d_shared: usize,
    pub segments: usize,
    pub mode: FusionMode,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub quality_hidden: usize,
    pub use_tfe: bool,
    pub use_qam: bool,
    pub modalities: ModalitySet,
}

impl FusionConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            visual_dim: cfg.embed_dim,
            audio_dim: cfg.embed_dim,
            text_dim: cfg.dim_text,
            tcn_layers: cfg.tcn_layers,
            tcn_kernel: cfg.tcn_kernel,
            tcn_channels: cfg.tcn_channels,
            lstm_hidden: cfg.lstm_hidden,
            d_shared: cfg.d_shared,
            segments: cfg.segments,
            mode: cfg.fusion_mode,
            transformer_layers: cfg.transformer_layers,
            heads: cfg.heads,
            ffn_hidden: cfg.ffn_hidden,
            quality_hidden: cfg.quality_hidden,
            use_tfe: cfg.use_tfe,
            use_qam: cfg.use_qam,
            modalities: cfg.modalities,
        }
    }

    /// Width entering the Transformer.
    pub fn model_width(&self) -> usize {
        match self.mode {
            FusionMode::Sum => self.d_shared,
            FusionMode::Concat => self.d_shared * self.modalities.count(),
        }
    }
}

/// Frozen-encoder outputs of one sample, computed once before Stage II.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    /// `[T×d_e]` per-frame visual embeddings.
    pub visual: Tensor,
    /// `[T×d_e]` per-frame audio embeddings.
    pub audio: Tensor,
    /// `[1×D_s]` utterance vector.
    pub text: Tensor,
    pub target: [f64; NUM_EMOTIONS],
}

impl EncodedSample {
    pub fn frames(&self) -> usize {
        self.visual.shape()[0]
    }
}

/// Runs the frozen encoders over every frame of every sample.
pub fn encode_corpus(encoders: &FrozenEncoders, samples: &[SampleBundle]) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(EncodedSample {
                id: s.id.clone(),
                visual: encoders.encode_frames(Modality::Visual, &s.visual.frames)?,
                audio: encoders.encode_frames(Modality::Audio, &s.audio.frames)?,
                text: s.text.frames.reshape(&[1, s.text.frames.numel()])?,
                target: s.target,
            })
        })
        .collect()
}

/// Samples stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub visual: Tensor,
    pub audio: Tensor,
    pub text: Tensor,
    pub targets: Tensor,
    pub frames: usize,
}

impl EncodedBatch {
    pub fn stack(samples: &[&EncodedSample]) -> Result<Self> {
        let first = samples.first().ok_or(FusionError::EmptyBatch)?;
        let frames = first.frames();
        for s in samples {
            if s.frames() != frames || s.audio.shape()[0] != frames {
                return Err(FusionError::RaggedBatch(frames, s.frames()));
            }
        }
        let stack = |get: &dyn Fn(&EncodedSample) -> &Tensor| -> Result<Tensor> {
            let inner = get(first).shape().to_vec();
            let mut shape = vec![samples.len()];
            shape.extend(&inner);
            let mut data = Vec::with_capacity(shape.iter().product());
            for s in samples {
                let t = get(s);
                if t.shape() != inner.as_slice() {
                    return Err(FusionError::InvalidConfig(format!(
                        "sample `{}` has feature shape {:?}, expected {inner:?}",
                        s.id,
                        t.shape()
                    )));
                }
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::new(shape, data)?)
        };
        let targets = samples.iter().flat_map(|s| s.target).collect();
        Ok(Self {
            visual: stack(&|s| &s.visual)?,
            audio: stack(&|s| &s.audio)?,
            text: stack(&|s| &s.text)?,
            targets: Tensor::new(vec![samples.len(), NUM_EMOTIONS], targets)?,
            frames,
        })
    }
}

/// Handles into the tape produced by [`FusionModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct FusionForward {
    /// `[B×6]` intensities in (0,1).
    pub prediction: Var,
    /// `[B×T×width]` Transformer input before positions are added.
    pub fused: Var,
    /// `[B×T×n]` quality scores and weights, when quality weighting is on.
    pub scores: Option<Var>,
    pub beta: Option<Var>,
}

/// The Stage-II network. Parameters live in a separate [`ParamStore`] so
/// the same model can be evaluated with live or EMA weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    tcn: TcnStack,
    lstm: BiLstm,
    gate: DifferenceGate,
    maps: Vec<(Modality, Mlp)>,
    qam: QualityModule,
    layers: Vec<EncoderLayer>,
}

impl FusionModel {
    pub fn new(config: FusionConfig) -> Result<Self> {
        if config.modalities.count() == 0 {
            return Err(FusionError::InvalidConfig("no active modality".into()));
        }
        let width = config.model_width();
        if config.heads == 0 || width % config.heads != 0 {
            return Err(FusionError::InvalidConfig(format!(
                "width {width} not divisible by {} heads",
                config.heads
            )));
        }
        let present = config.modalities.present();
        let tcn = TcnStack {
            name: "tcn".into(),
            input_dim: config.visual_dim,
            channels: config.tcn_channels,
            layers: config.tcn_layers,
            kernel: config.tcn_kernel,
        };
        let lstm = BiLstm {
            name: "lstm".into(),
            input_dim: config.audio_dim,
            hidden: config.lstm_hidden,
        };
        let gate = DifferenceGate {
            name: "gate".into(),
            width: lstm.output_dim(),
        };
        let maps = present
            .iter()
            .map(|&m| {
                let c_in = match m {
                    Modality::Visual => tcn.channels,
                    Modality::Audio => lstm.output_dim(),
                    Modality::Text => config.text_dim,
                };
                let name = format!("map.{}", modality_key(m));
                (m, Mlp::new(name, c_in, config.d_shared, config.d_shared))
            })
            .collect();
        let qam = QualityModule::new("qam", &present, config.d_shared, config.quality_hidden);
        let layers = (0..config.transformer_layers)
            .map(|l| EncoderLayer {
                name: format!("encoder.{l}"),
                width,
                heads: config.heads,
                ffn_hidden: config.ffn_hidden,
            })
            .collect();
        Ok(Self {
            config,
            tcn,
            lstm,
            gate,
            maps,
            qam,
            layers,
        })
    }

    pub fn present(&self) -> Vec<Modality> {
        self.maps.iter().map(|(m, _)| *m).collect()
    }

    /// Fresh parameters; only modules on an active path are created.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &self.config;
        if c.modalities.visual {
            self.tcn.init(&mut store, &mut rng);
        }
        if c.modalities.audio {
            self.lstm.init(&mut store, &mut rng);
            if c.use_tfe {
                self.gate.init(&mut store, &mut rng);
            }
        }
        for (_, mlp) in &self.maps {
            mlp.init(&mut store, &mut rng);
        }
        if c.use_qam {
            self.qam.init(&mut store, &mut rng);
        }
        for layer in &self.layers {
            layer.init(&mut store, &mut rng);
        }
        init_linear(&mut store, "head", c.model_width(), NUM_EMOTIONS, &mut rng);
        store
    }

    /// Checks that `params` has every tensor this model reads, with the
    /// right shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        Ok(params.check_matches(&self.init(0))?)
    }

    fn stream(&self, tape: &mut Tape, params: &Binding, m: Modality, batch: &EncodedBatch) -> Result<Var> {
        let c = &self.config;
        let h = match m {
            Modality::Visual => {
                let x = tape.constant(batch.visual.clone());
                let h = self.tcn.forward(tape, params, x)?;
                if c.use_tfe {
                    let plan = SegmentPlan::new(batch.frames, c.segments)?;
                    tape.time_mix(h, Arc::new(plan.smoothing_matrix()))?
                } else {
                    h
                }
            }
            Modality::Audio => {
                let x = tape.constant(batch.audio.clone());
                let h = self.lstm.forward(tape, params, x)?;
                if c.use_tfe {
                    self.gate.forward(tape, params, h)?
                } else {
                    h
                }
            }
            Modality::Text => tape.constant(batch.text.clone()),
        };
        let mlp = &self.maps.iter().find(|(k, _)| *k == m).expect("present modality").1;
        Ok(mlp.forward(tape, params, h)?)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, batch: &EncodedBatch) -> Result<FusionForward> {
        let frames = batch.frames;
        let present = self.present();
        let mut streams = Vec::with_capacity(present.len());
        for &m in &present {
            streams.push(self.stream(tape, params, m, batch)?);
        }

        let (scores, beta) = if self.config.use_qam {
            let (s, b) = self.qam.forward(tape, params, &streams, frames)?;
            (Some(s), Some(b))
        } else {
            (None, None)
        };
        let mut weighted = Vec::with_capacity(streams.len());
        for (j, &s) in streams.iter().enumerate() {
            let w = match beta {
                Some(b) => {
                    let bj = tape.slice(b, 2, j, j + 1)?;
                    tape.mul(bj, s)?
                }
                None => {
                    let s = if tape.value(s).shape()[1] != frames {
                        tape.time_mix(s, Arc::new(Tensor::ones(&[frames, 1])))?
                    } else {
                        s
                    };
                    tape.scale(s, 1.0 / streams.len() as f64)?
                }
            };
            weighted.push(w);
        }
        let fused = match self.config.mode {
            FusionMode::Sum => {
                let mut acc = weighted[0];
                for &w in &weighted[1..] {
                    acc = tape.add(acc, w)?;
                }
                acc
            }
            FusionMode::Concat => tape.concat(&weighted, 2)?,
        };

        let width = self.config.model_width();
        let pe = tape.constant(positional_encoding(frames, width));
        let mut x = tape.add(fused, pe)?;
        for layer in &self.layers {
            x = layer.forward(tape, params, x)?;
        }
        let pooled = tape.mean(x, 1)?;
        let logits = linear(tape, params, "head", pooled)?;
        let prediction = tape.sigmoid(logits)?;
        Ok(FusionForward {
            prediction,
            fused,
            scores,
            beta,
        })
    }

    /// Forward-only predictions, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, params: &ParamStore, samples: &[EncodedSample], chunk: usize) -> Result<Vec<[f64; NUM_EMOTIONS]>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let refs: Vec<&EncodedSample> = part.iter().collect();
            let batch = EncodedBatch::stack(&refs)?;
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape, false);
            let fwd = self.forward(&mut tape, &binding, &batch)?;
            for row in tape.value(fwd.prediction).data().chunks(NUM_EMOTIONS) {
                out.push(row.try_into().expect("six outputs"));
            }
        }
        Ok(out)
    }

    /// Per-frame quality scores and weights for one sample; `None` when
    /// quality weighting is disabled.
    pub fn quality(&self, params: &ParamStore, sample: &EncodedSample) -> Result<Option<QualityWeights>> {
        if !self.config.use_qam {
            return Ok(None);
        }
        let batch = EncodedBatch::stack(&[sample])?;
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &binding, &batch)?;
        let (s, b) = (fwd.scores.expect("qam on"), fwd.beta.expect("qam on"));
        Ok(Some(QualityWeights::from_columns(
            &self.present(),
            tape.value(s),
            tape.value(b),
        )))
    }
}
