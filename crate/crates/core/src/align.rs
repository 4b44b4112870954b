//! Stage I: contrastive alignment of the visual and audio encoders with a
//! text encoder, using confidence-weighted InfoNCE.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::config::Config;
use crate::corpus::{fnv1a, render_prompt, AnnotationRecord, CorpusError, Modality, SampleBundle};
use crate::params::{init_linear, linear, uniform_fan_in, Binding, ParamError, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::train::{clip_grad_norm, sgd_momentum_step, OptimState, ScheduleState, TrainError};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("prompt has no tokens")]
    EmptyPrompt,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid embedding batch: {0}")]
    InvalidBatch(String),
    #[error("confidence spread must be a non-negative number, got {0}")]
    InvalidSpread(f64),
    #[error("sample `{0}` has no matching annotation")]
    UnpairedSample(String),
    #[error("annotation `{0}` has no matching sample")]
    UnpairedAnnotation(String),
    #[error("alignment corpus is empty")]
    EmptyCorpus,
    #[error("non-finite contrastive loss at epoch {epoch}")]
    NumericFailure { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Two affine maps with a tanh between them, then L2 normalisation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyEncoder {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl ToyEncoder {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden_dim: usize, embed_dim: usize) -> Self {
        Self {
            name: name.into(),
            input_dim,
            hidden_dim,
            embed_dim,
        }
    }

    /// Registers the layers plus an identity input normalisation.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        store.insert(self.shift_name(), Tensor::zeros(&[self.input_dim]));
        store.insert(self.gain_name(), Tensor::ones(&[self.input_dim]));
        init_linear(store, &format!("{}.l1", self.name), self.input_dim, self.hidden_dim, rng);
        init_linear(store, &format!("{}.l2", self.name), self.hidden_dim, self.embed_dim, rng);
    }

    /// Per-feature offset subtracted from inputs; fitted, never trained.
    pub fn shift_name(&self) -> String {
        format!("{}.input_shift", self.name)
    }

    /// Per-feature factor applied after the shift; fitted, never trained.
    pub fn gain_name(&self) -> String {
        format!("{}.input_gain", self.name)
    }

    /// Sets the input normalisation to standardise the rows of `inputs`.
    pub fn fit_input_norm(&self, store: &mut ParamStore, inputs: &Tensor) {
        let (n, d) = (inputs.shape()[0], inputs.shape()[1]);
        let mut shift = vec![0.0; d];
        let mut gain = vec![1.0; d];
        for j in 0..d {
            let col = (0..n).map(|i| inputs.data()[i * d + j]);
            let mu = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            shift[j] = mu;
            gain[j] = 1.0 / var.sqrt().max(1e-6);
        }
        store.insert(self.shift_name(), Tensor::new(vec![d], shift).expect("d values"));
        store.insert(self.gain_name(), Tensor::new(vec![d], gain).expect("d values"));
    }

    fn is_fitted(&self, name: &str) -> bool {
        name == self.shift_name() || name == self.gain_name()
    }

    /// Maps `[…×input_dim]` to unit-norm `[…×embed_dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var, TensorError> {
        let x = tape.sub(x, params.var(&self.shift_name()))?;
        let x = tape.mul(x, params.var(&self.gain_name()))?;
        let h = linear(tape, params, &format!("{}.l1", self.name), x)?;
        let h = tape.tanh(h)?;
        let e = linear(tape, params, &format!("{}.l2", self.name), h)?;
        tape.l2_normalize(e)
    }
}

/// Hashed bag-of-tokens text encoder with a learnable `[V×d]` table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoder {
    pub name: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl TextEncoder {
    pub fn new(name: impl Into<String>, vocab_size: usize, embed_dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab_size,
            embed_dim,
        }
    }

    pub fn table_name(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        store.insert(self.table_name(), uniform_fan_in(&[self.vocab_size, self.embed_dim], 1, rng));
    }

    /// `[N×V]` matrix whose row i averages the one-hot buckets of prompt i.
    pub fn bag(&self, prompts: &[String]) -> Result<Tensor, AlignError> {
        let mut data = vec![0.0; prompts.len() * self.vocab_size];
        for (i, p) in prompts.iter().enumerate() {
            let row = &mut data[i * self.vocab_size..(i + 1) * self.vocab_size];
            bag_row(p, row)?;
        }
        Ok(Tensor::new(vec![prompts.len(), self.vocab_size], data)?)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, bag: Var) -> Result<Var, TensorError> {
        let e = tape.matmul(bag, params.var(&self.table_name()))?;
        tape.l2_normalize(e)
    }
}

/// Splits on whitespace and `( ) , : =`; dots stay inside tokens so numbers
/// like `0.83` survive whole.
pub fn tokenize(prompt: &str) -> Vec<&str> {
    prompt
        .split(|c: char| c.is_whitespace() || matches!(c, '(' | ')' | ',' | ':' | '='))
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn token_bucket(token: &str, vocab_size: usize) -> usize {
    (fnv1a(token.as_bytes()) % vocab_size as u64) as usize
}

fn bag_row(prompt: &str, row: &mut [f64]) -> Result<(), AlignError> {
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(AlignError::EmptyPrompt);
    }
    let share = 1.0 / tokens.len() as f64;
    for t in tokens {
        row[token_bucket(t, row.len())] += share;
    }
    Ok(())
}

/// Mean of the prompt's token rows of `vocab_embedding`, L2-normalised; `[1×d]`.
pub fn encode_text_tokens(prompt: &str, vocab_embedding: &Tensor) -> Result<Tensor, AlignError> {
    if vocab_embedding.rank() != 2 {
        return Err(AlignError::InvalidBatch("vocabulary table must be [V×d]".into()));
    }
    let (v, d) = (vocab_embedding.shape()[0], vocab_embedding.shape()[1]);
    let mut bag = vec![0.0; v];
    bag_row(prompt, &mut bag)?;
    let mut out = vec![0.0; d];
    for (i, &w) in bag.iter().enumerate().filter(|(_, w)| **w != 0.0) {
        for (o, &e) in out.iter_mut().zip(vocab_embedding.row(i)) {
            *o += w * e;
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    out.iter_mut().for_each(|x| *x /= norm);
    Ok(Tensor::new(vec![1, d], out)?)
}

/// Paired, unit-norm embeddings of one modality and of text; positives sit
/// on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub f_mod: Tensor,
    pub f_text: Tensor,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl EmbeddingBatch {
    pub fn validate(&self) -> Result<(), AlignError> {
        check_temperature(self.temperature)?;
        let (fm, ft) = (self.f_mod.shape(), self.f_text.shape());
        if fm.len() != 2 || fm != ft || fm[0] == 0 {
            return Err(AlignError::InvalidBatch(format!("embedding shapes {fm:?} and {ft:?}")));
        }
        if self.weights.len() != fm[0] || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(AlignError::InvalidBatch(format!(
                "need {} non-negative weights, got {:?}",
                fm[0], self.weights
            )));
        }
        for t in [&self.f_mod, &self.f_text] {
            for i in 0..fm[0] {
                let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(AlignError::InvalidBatch(format!("row {i} has norm {n}")));
                }
            }
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<(), AlignError> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(AlignError::NonPositiveTemperature(tau))
    }
}

/// `−(1/N)·Σᵢ wᵢ·log softmaxⱼ(fᵢ·gⱼ/τ)[i]`.
pub fn infonce_weighted(batch: &EmbeddingBatch) -> Result<f64, AlignError> {
    batch.validate()?;
    let mut tape = Tape::new();
    let f = tape.constant(batch.f_mod.clone());
    let g = tape.constant(batch.f_text.clone());
    let loss = infonce_on_tape(&mut tape, f, g, &batch.weights, batch.temperature)?;
    Ok(tape.value(loss).item())
}

/// Same loss from a precomputed `[N×N]` similarity matrix.
pub fn infonce_from_similarities(sims: &Tensor, weights: &[f64], tau: f64) -> Result<f64, AlignError> {
    check_temperature(tau)?;
    let n = sims.shape().first().copied().unwrap_or(0);
    if sims.shape() != [n, n] || n == 0 || weights.len() != n {
        return Err(AlignError::InvalidBatch(format!(
            "similarities {:?} with {} weights",
            sims.shape(),
            weights.len()
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(sims.clone());
    let loss = weighted_nll(&mut tape, s, weights, tau)?;
    Ok(tape.value(loss).item())
}

/// Differentiable modality→text InfoNCE on `[N×d]` embeddings.
pub fn infonce_on_tape(tape: &mut Tape, f_mod: Var, f_text: Var, weights: &[f64], tau: f64) -> Result<Var, AlignError> {
    check_temperature(tau)?;
    let gt = tape.transpose(f_text)?;
    let sims = tape.matmul(f_mod, gt)?;
    weighted_nll(tape, sims, weights, tau)
}

/// Average of both directions of [`infonce_on_tape`].
pub fn infonce_symmetric_on_tape(
    tape: &mut Tape,
    f_mod: Var,
    f_text: Var,
    weights: &[f64],
    tau: f64,
) -> Result<Var, AlignError> {
    let fwd = infonce_on_tape(tape, f_mod, f_text, weights, tau)?;
    let bwd = infonce_on_tape(tape, f_text, f_mod, weights, tau)?;
    let both = tape.add(fwd, bwd)?;
    Ok(tape.scale(both, 0.5)?)
}

fn weighted_nll(tape: &mut Tape, sims: Var, weights: &[f64], tau: f64) -> Result<Var, AlignError> {
    let n = weights.len();
    let logits = tape.scale(sims, 1.0 / tau)?;
    let logp = tape.log_softmax(logits)?;
    let mut pick = Tensor::zeros(&[n, n]);
    for (i, w) in weights.iter().enumerate() {
        pick.data_mut()[i * n + i] = -w / n as f64;
    }
    let pick = tape.constant(pick);
    let picked = tape.mul(logp, pick)?;
    Ok(tape.sum(picked)?)
}

/// `1/(1+σ)`: the un-normalised weight of a pair whose VA spread is σ.
pub fn raw_confidence(va_stddev: f64) -> f64 {
    1.0 / (1.0 + va_stddev)
}

/// Raw confidences rescaled to batch mean 1.
pub fn confidence_weights(va_stddevs: &[f64]) -> Result<Vec<f64>, AlignError> {
    if let Some(&bad) = va_stddevs.iter().find(|s| !(**s >= 0.0)) {
        return Err(AlignError::InvalidSpread(bad));
    }
    let raw: Vec<f64> = va_stddevs.iter().map(|&s| raw_confidence(s)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if mean == 0.0 {
        return Ok(raw);
    }
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Top-1 retrieval accuracy of queries against candidates: the fraction of
/// rows i whose most similar candidate is candidate i.
pub fn retrieval_accuracy(queries: &Tensor, candidates: &Tensor) -> Result<f64, AlignError> {
    let sims = crate::tensor::matmul(queries, &transpose2(candidates))?;
    let n = queries.shape()[0];
    if n == 0 || sims.shape()[1] != n {
        return Err(AlignError::InvalidBatch("retrieval needs N queries and N candidates".into()));
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = sims.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == i
        })
        .count();
    Ok(hits as f64 / n as f64)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("same size")
}

/// The three Stage-I encoders with their parameters. Once built they are
/// only ever evaluated, never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    pub visual: ToyEncoder,
    pub audio: ToyEncoder,
    pub text: TextEncoder,
    params: ParamStore,
}

impl FrozenEncoders {
    fn architecture(cfg: &Config) -> (ToyEncoder, ToyEncoder, TextEncoder) {
        (
            ToyEncoder::new("visual_encoder", cfg.dim_visual, cfg.encoder_hidden, cfg.embed_dim),
            ToyEncoder::new("audio_encoder", cfg.dim_audio, cfg.encoder_hidden, cfg.embed_dim),
            TextEncoder::new("text_encoder", cfg.vocab_size, cfg.embed_dim),
        )
    }

    fn init_params(cfg: &Config, seed: u64) -> ParamStore {
        let (v, a, t) = Self::architecture(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        v.init(&mut store, &mut rng);
        a.init(&mut store, &mut rng);
        t.init(&mut store, &mut rng);
        store
    }

    /// Untrained encoders, for runs that skip Stage I.
    pub fn random(cfg: &Config, seed: u64) -> Self {
        Self::from_params(cfg, Self::init_params(cfg, seed)).expect("fresh parameters match")
    }

    /// Wraps loaded parameters, checking every expected tensor is present
    /// with the right shape.
    pub fn from_params(cfg: &Config, params: ParamStore) -> Result<Self, ParamError> {
        params.check_matches(&Self::init_params(cfg, 0))?;
        let (visual, audio, text) = Self::architecture(cfg);
        Ok(Self {
            visual,
            audio,
            text,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn embed_dim(&self) -> usize {
        self.visual.embed_dim
    }

    fn encoder(&self, m: Modality) -> &ToyEncoder {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
            Modality::Text => panic!("text is not encoded frame-wise"),
        }
    }

    /// Per-frame embeddings `[T×d]` of a visual or audio sequence.
    pub fn encode_frames(&self, m: Modality, frames: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let x = tape.constant(frames.clone());
        let y = self.encoder(m).forward(&mut tape, &binding, x)?;
        Ok(tape.value(y).clone())
    }

    /// Embeddings `[N×d]` of the temporal means of several samples.
    pub fn encode_pooled(&self, m: Modality, samples: &[SampleBundle]) -> Result<Tensor, TensorError> {
        self.encode_frames(m, &temporal_means(samples, m)?)
    }

    pub fn encode_prompts(&self, prompts: &[String]) -> Result<Tensor, AlignError> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let bag = tape.constant(self.text.bag(prompts)?);
        let y = self.text.forward(&mut tape, &binding, bag)?;
        Ok(tape.value(y).clone())
    }
}

/// `[N×D]` matrix of each sample's mean frame for one modality.
pub fn temporal_means(samples: &[SampleBundle], m: Modality) -> Result<Tensor, TensorError> {
    let dim = samples.first().map_or(0, |s| s.modality(m).dim());
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        let seq = s.modality(m);
        if seq.dim() != dim {
            return Err(TensorError::ShapeMismatch {
                op: "temporal_means",
                lhs: vec![dim],
                rhs: vec![seq.dim()],
            });
        }
        let t = seq.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for i in 0..seq.len() {
            for (acc, &x) in mean.iter_mut().zip(seq.frames.row(i)) {
                *acc += x / t;
            }
        }
        data.extend(mean);
    }
    Tensor::new(vec![samples.len(), dim], data)
}

/// Result of [`pretrain_align`].
#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub encoders: FrozenEncoders,
    /// Mean per-batch `L_v2t + L_a2t` for each epoch.
    pub loss_history: Vec<f64>,
    /// Full-corpus visual→text and audio→text losses after training.
    pub final_loss_visual: f64,
    pub final_loss_audio: f64,
    /// Text→visual and text→audio top-1 retrieval over the whole corpus.
    pub retrieval_visual: f64,
    pub retrieval_audio: f64,
}

/// Pairs each sample with its annotation by id, in corpus order.
pub fn pair_annotations<'a>(
    corpus: &[SampleBundle],
    annotations: &'a [AnnotationRecord],
) -> Result<Vec<&'a AnnotationRecord>, AlignError> {
    let by_id: HashMap<&str, &AnnotationRecord> = annotations.iter().map(|a| (a.id.as_str(), a)).collect();
    let paired = corpus
        .iter()
        .map(|s| {
            by_id
                .get(s.id.as_str())
                .copied()
                .ok_or_else(|| AlignError::UnpairedSample(s.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if annotations.len() != corpus.len() {
        let ids: std::collections::HashSet<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
        if let Some(extra) = annotations.iter().find(|a| !ids.contains(a.id.as_str())) {
            return Err(AlignError::UnpairedAnnotation(extra.id.clone()));
        }
    }
    Ok(paired)
}

struct AlignData {
    visual: Tensor,
    audio: Tensor,
    bags: Tensor,
    spreads: Vec<f64>,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).expect("rows gathered")
}

fn contrastive_pass(
    tape: &mut Tape,
    enc: &FrozenEncoders,
    binding: &Binding,
    data: &AlignData,
    idx: &[usize],
    cfg: &Config,
) -> Result<(Var, Var), AlignError> {
    let weights = confidence_weights(&idx.iter().map(|&i| data.spreads[i]).collect::<Vec<_>>())?;
    let xv = tape.constant(gather_rows(&data.visual, idx));
    let xa = tape.constant(gather_rows(&data.audio, idx));
    let bag = tape.constant(gather_rows(&data.bags, idx));
    let fv = enc.visual.forward(tape, binding, xv)?;
    let fa = enc.audio.forward(tape, binding, xa)?;
    let ft = enc.text.forward(tape, binding, bag)?;
    let loss_fn = if cfg.symmetric_loss {
        infonce_symmetric_on_tape
    } else {
        infonce_on_tape
    };
    let lv = loss_fn(tape, fv, ft, &weights, cfg.temperature)?;
    let la = loss_fn(tape, fa, ft, &weights, cfg.temperature)?;
    Ok((lv, la))
}

/// Trains the visual–text and audio–text paths jointly on `L_v2t + L_a2t`
/// with momentum SGD under the cosine warm-restart schedule.
pub fn pretrain_align(
    corpus: &[SampleBundle],
    annotations: &[AnnotationRecord],
    cfg: &Config,
) -> Result<AlignOutcome, AlignError> {
    if corpus.is_empty() {
        return Err(AlignError::EmptyCorpus);
    }
    let paired = pair_annotations(corpus, annotations)?;
    let prompts = paired.iter().map(|a| render_prompt(a)).collect::<Result<Vec<_>, _>>()?;

    let mut enc = FrozenEncoders::random(cfg, cfg.seed);
    let visual = temporal_means(corpus, Modality::Visual)?;
    let audio = temporal_means(corpus, Modality::Audio)?;
    enc.visual.fit_input_norm(&mut enc.params, &visual);
    enc.audio.fit_input_norm(&mut enc.params, &audio);
    let data = AlignData {
        visual,
        audio,
        bags: enc.text.bag(&prompts)?,
        spreads: paired.iter().map(|a| a.va_stddev).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4531);
    let mut schedule = ScheduleState::new(cfg.align_eta_max, cfg.align_eta_min, cfg.cycle_epochs)?;
    let mut opt = OptimState::new(cfg.momentum);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let batch = cfg.align_batch_size.max(2).min(corpus.len().max(1));
    let mut loss_history = Vec::with_capacity(cfg.align_epochs);

    for epoch in 0..cfg.align_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(batch) {
            if idx.len() < 2 && corpus.len() >= 2 {
                continue;
            }
            let mut tape = Tape::new();
            let binding = enc
                .params
                .bind_where(&mut tape, |n| !enc.visual.is_fitted(n) && !enc.audio.is_fitted(n));
            let (lv, la) = contrastive_pass(&mut tape, &enc, &binding, &data, idx, cfg)?;
            let loss = tape.add(lv, la)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(AlignError::NumericFailure { epoch });
            }
            let grads = tape.backward(loss)?;
            let mut grads = binding.gradients(&grads);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            sgd_momentum_step(&mut enc.params, &grads, &mut opt, schedule.current_eta)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("align epoch {epoch}: eta {:.4} loss {mean:.4}", schedule.current_eta);
        loss_history.push(mean);
        schedule.advance();
    }

    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut tape = Tape::new();
    let binding = enc.params.bind(&mut tape, false);
    let (lv, la) = contrastive_pass(&mut tape, &enc, &binding, &data, &all, cfg)?;
    let (final_loss_visual, final_loss_audio) = (tape.value(lv).item(), tape.value(la).item());

    let text = enc.encode_prompts(&prompts)?;
    let retrieval_visual = retrieval_accuracy(&text, &enc.encode_frames(Modality::Visual, &data.visual)?)?;
    let retrieval_audio = retrieval_accuracy(&text, &enc.encode_frames(Modality::Audio, &data.audio)?)?;

    Ok(AlignOutcome {
        encoders: enc,
        loss_history,
        final_loss_visual,
        final_loss_audio,
        retrieval_visual,
        retrieval_audio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{annotate, generate_corpus};

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let b = EmbeddingBatch {
            f_mod: unit_rows(&[vec![0.3, -0.2, 0.9]]),
            f_text: unit_rows(&[vec![-1.0, 0.5, 0.1]]),
            weights: vec![1.0],
            temperature: 0.07,
        };
        assert_eq!(infonce_weighted(&b).unwrap(), 0.0);
    }

    #[test]
    fn equal_similarities_give_log_n() {
        let row = vec![0.0, 1.0];
        let b = EmbeddingBatch {
            f_mod: unit_rows(&vec![row.clone(); 5]),
            f_text: unit_rows(&vec![row; 5]),
            weights: vec![1.0; 5],
            temperature: 0.07,
        };
        assert!((infonce_weighted(&b).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_similarity_example() {
        let s = Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let expected = (1.0 + (-10f64).exp()).ln();
        let got = infonce_from_similarities(&s, &[1.0, 1.0], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn non_positive_temperature_errors() {
        let s = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            infonce_from_similarities(&s, &[1.0], 0.0),
            Err(AlignError::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn confidence_weight_examples() {
        assert_eq!(confidence_weights(&[0.3, 0.3, 0.3]).unwrap(), vec![1.0; 3]);
        let w = confidence_weights(&[0.0, 1.0]).unwrap();
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(raw_confidence(1e12) < 1e-11);
        assert!(confidence_weights(&[-0.1]).is_err());
    }

    #[test]
    fn text_encoding_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = uniform_fan_in(&[64, 8], 1, &mut rng);
        let a = encode_text_tokens("Happy (Intensity: High) with AU6", &table).unwrap();
        assert_eq!(a, encode_text_tokens("Happy (Intensity: High) with AU6", &table).unwrap());
        assert_eq!(a.shape(), &[1, 8]);
        let b = encode_text_tokens("AU6 with High Intensity Happy", &table).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        let one = encode_text_tokens("Joy", &table).unwrap();
        let row = table.row(token_bucket("Joy", 64));
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (x, r) in one.data().iter().zip(row) {
            assert!((x - r / n).abs() < 1e-15);
        }
        assert!(matches!(encode_text_tokens(" ,() ", &table), Err(AlignError::EmptyPrompt)));
    }

    #[test]
    fn tokenizer_keeps_decimals() {
        assert_eq!(
            tokenize("Sad (Intensity: Low) with AU4 (Brow Lowerer), Valence=-0.25, Arousal=0.10"),
            vec!["Sad", "Intensity", "Low", "with", "AU4", "Brow", "Lowerer", "Valence", "-0.25", "Arousal", "0.10"]
        );
    }

    #[test]
    fn unpaired_ids_error() {
        let corpus = generate_corpus(1, 3, 4, (4, 4, 4)).unwrap();
        let mut ann: Vec<_> = corpus.iter().map(|s| annotate(s, 0)).collect();
        ann[1].id = "other".into();
        let cfg = Config {
            align_epochs: 1,
            dim_visual: 4,
            dim_audio: 4,
            dim_text: 4,
            ..Config::default()
        };
        assert!(matches!(pretrain_align(&corpus, &ann, &cfg), Err(AlignError::UnpairedSample(_))));
    }

    #[test]
    fn retrieval_of_identical_sets_is_perfect() {
        let e = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]]);
        assert_eq!(retrieval_accuracy(&e, &e).unwrap(), 1.0);
        let swapped = unit_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.2]]);
        assert!((retrieval_accuracy(&e, &swapped).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
