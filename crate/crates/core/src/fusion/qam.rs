//! Quality-aware weighting: per-modality scores turned into per-frame
//! fusion weights by a softmax across modalities.

use std::sync::Arc;

use rand::Rng;

use super::mlp::Mlp;
use crate::autograd::{Tape, Var};
use crate::corpus::Modality;
use crate::params::{Binding, ParamStore};
use crate::tensor::{Result, Tensor};

/// One scoring MLP per present modality, same shape, separate weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityModule {
    pub scorers: Vec<(Modality, Mlp)>,
}

impl QualityModule {
    pub fn new(name: &str, modalities: &[Modality], width: usize, hidden: usize) -> Self {
        let scorers = modalities
            .iter()
            .map(|&m| (m, Mlp::new(format!("{name}.{}", modality_key(m)), width, hidden, 1)))
            .collect();
        Self { scorers }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (_, mlp) in &self.scorers {
            mlp.init(store, rng);
        }
    }

    /// Scores each stream and returns `(scores, β)`, both `[B×T×n]` with
    /// columns in `scorers` order. Streams are `[B×T×d]`, or `[B×1×d]` for
    /// a per-sample stream that is broadcast over time.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, streams: &[Var], frames: usize) -> Result<(Var, Var)> {
        let mut cols = Vec::with_capacity(streams.len());
        for ((_, mlp), &s) in self.scorers.iter().zip(streams) {
            let mut q = mlp.forward(tape, params, s)?;
            let t = tape.value(q).shape()[1];
            if t != frames {
                q = tape.time_mix(q, Arc::new(Tensor::ones(&[frames, t])))?;
            }
            cols.push(q);
        }
        let scores = tape.concat(&cols, 2)?;
        let beta = tape.softmax(scores)?;
        Ok((scores, beta))
    }
}

pub(crate) fn modality_key(m: Modality) -> &'static str {
    match m {
        Modality::Visual => "visual",
        Modality::Audio => "audio",
        Modality::Text => "text",
    }
}

/// Per-frame scores and fusion weights of one sample. Absent modalities
/// are `None`; the text column is constant over time.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityWeights {
    pub beta_v: Option<Vec<f64>>,
    pub beta_a: Option<Vec<f64>>,
    pub beta_s: Option<Vec<f64>>,
    pub q_v: Option<Vec<f64>>,
    pub q_a: Option<Vec<f64>>,
    pub q_s: Option<f64>,
}

impl QualityWeights {
    /// Splits `[T×n]` score and weight matrices into named columns.
    pub fn from_columns(modalities: &[Modality], scores: &Tensor, beta: &Tensor) -> Self {
        let n = modalities.len();
        let t = beta.numel() / n.max(1);
        let column = |m: &Tensor, j: usize| (0..t).map(|i| m.data()[i * n + j]).collect::<Vec<f64>>();
        let mut out = QualityWeights {
            beta_v: None,
            beta_a: None,
            beta_s: None,
            q_v: None,
            q_a: None,
            q_s: None,
        };
        for (j, m) in modalities.iter().enumerate() {
            match m {
                Modality::Visual => {
                    out.beta_v = Some(column(beta, j));
                    out.q_v = Some(column(scores, j));
                }
                Modality::Audio => {
                    out.beta_a = Some(column(beta, j));
                    out.q_a = Some(column(scores, j));
                }
                Modality::Text => {
                    out.beta_s = Some(column(beta, j));
                    out.q_s = Some(scores.data()[j]);
                }
            }
        }
        out
    }
}

/// Forward-only weights for one sample from mapped `[T×d]` visual and audio
/// features and a mapped `[1×d]` text row.
pub fn quality_weights(
    h_v: &Tensor,
    h_a: &Tensor,
    f_s: &Tensor,
    module: &QualityModule,
    params: &ParamStore,
) -> Result<QualityWeights> {
    let frames = h_v.shape()[0];
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, false);
    let streams: Vec<Var> = module
        .scorers
        .iter()
        .map(|(m, _)| {
            let t = match m {
                Modality::Visual => h_v,
                Modality::Audio => h_a,
                Modality::Text => f_s,
            };
            let s = t.shape();
            tape.constant(t.reshape(&[1, s[0], s[1]]).expect("same size"))
        })
        .collect();
    let (scores, beta) = module.forward(&mut tape, &binding, &streams, frames)?;
    let mods: Vec<Modality> = module.scorers.iter().map(|(m, _)| *m).collect();
    Ok(QualityWeights::from_columns(&mods, tape.value(scores), tape.value(beta)))
}
