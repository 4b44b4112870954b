use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, ema_update, mse_on_tape, sgd_momentum_step, EmaState, OptimState, ScheduleState, TrainError};
use crate::autograd::Tape;
use crate::config::Config;
use crate::corpus::NUM_EMOTIONS;
use crate::eval::PearsonReport;
use crate::fusion::{EncodedBatch, EncodedSample, FusionConfig, FusionError, FusionModel};
use crate::params::ParamStore;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub eta: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_rho_mean: Option<f64>,
    pub val_rho_per_emotion: [Option<f64>; NUM_EMOTIONS],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    /// Live parameters after the last step.
    pub params: ParamStore,
    /// EMA shadow after the last step.
    pub ema: ParamStore,
    /// EMA shadow from the epoch with the best validation ρ (the final
    /// shadow when there is no validation set).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Momentum buffers after the last step; one per fusion parameter.
    pub optimizer: OptimState,
}

impl From<FusionError> for TrainError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Tensor(t) => TrainError::Tensor(t),
            FusionError::Param(p) => TrainError::Param(p),
            other => TrainError::InvalidConfig(other.to_string()),
        }
    }
}

const EVAL_CHUNK: usize = 32;

/// Forward-only loss and correlations of `params` on `samples`.
pub fn evaluate_encoded(
    model: &FusionModel,
    params: &ParamStore,
    samples: &[EncodedSample],
) -> Result<(f64, PearsonReport), TrainError> {
    let preds = model.predict(params, samples, EVAL_CHUNK)?;
    let targets: Vec<[f64; NUM_EMOTIONS]> = samples.iter().map(|s| s.target).collect();
    let loss = preds
        .iter()
        .zip(&targets)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        / (samples.len() * NUM_EMOTIONS) as f64;
    let report = PearsonReport::from_predictions(&targets, &preds).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    Ok((loss, report))
}

/// Minibatch momentum SGD on the fusion model with a per-epoch cosine
/// schedule, a per-step EMA, and best-by-validation selection of the EMA
/// shadow. Encoder outputs in `train` and `val` are fixed inputs, so the
/// encoders cannot change here.
pub fn train_stage2(
    train: &[EncodedSample],
    val: &[EncodedSample],
    cfg: &Config,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let model = FusionModel::new(FusionConfig::from_config(cfg))?;
    let mut params = model.init(cfg.seed);
    let mut ema = EmaState::new(cfg.ema_gamma, &params);
    let mut opt = OptimState::new(cfg.momentum);
    let mut schedule = ScheduleState::new(cfg.eta_max, cfg.eta_min, cfg.cycle_epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e32);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // Batches never mix sequence lengths.
        order.sort_by_key(|&i| train[i].frames());
        let eta = schedule.current_eta;
        let (mut total, mut count) = (0.0, 0usize);
        for (b, chunk) in batches(&order, train, cfg.batch_size).into_iter().enumerate() {
            let refs: Vec<&EncodedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = EncodedBatch::stack(&refs)?;
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape, true);
            let fwd = model.forward(&mut tape, &binding, &batch)?;
            let target = tape.constant(batch.targets.clone());
            let loss = mse_on_tape(&mut tape, fwd.prediction, target)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NumericFailure {
                    epoch,
                    batch: b,
                    detail: format!("loss {value} with learning rate {eta}"),
                });
            }
            let grads = tape.backward(loss)?;
            let mut grads = binding.gradients(&grads);
            let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NumericFailure {
                    epoch,
                    batch: b,
                    detail: format!("gradient norm {norm}"),
                });
            }
            sgd_momentum_step(&mut params, &grads, &mut opt, eta)?;
            ema_update(&mut ema, &params)?;
            total += value * refs.len() as f64;
            count += refs.len();
        }
        let shadow = ema.shadow().expect("initialised at start");

        let mut entry = EpochLog {
            epoch,
            eta,
            train_loss: total / count as f64,
            val_loss: None,
            val_rho_mean: None,
            val_rho_per_emotion: [None; NUM_EMOTIONS],
        };
        if !val.is_empty() {
            let (loss, report) = evaluate_encoded(&model, shadow, val)?;
            entry.val_loss = Some(loss);
            entry.val_rho_mean = report.rho_mean;
            entry.val_rho_per_emotion = report.rho_per_emotion;
            let score = report.rho_mean.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                best = Some((score, epoch, shadow.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: eta {eta:.2e} train {:.5} val {:?} rho {:?}",
            entry.train_loss,
            entry.val_loss,
            entry.val_rho_mean
        );
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entries serialise");
            writeln!(sink, "{line}").map_err(|e| TrainError::InvalidConfig(format!("writing log: {e}")))?;
        }
        log.push(entry);
        schedule.advance();
    }

    let ema = ema.into_shadow().expect("initialised at start");
    let (best_epoch, best) = match best {
        Some((_, epoch, p)) => (epoch, p),
        None => (cfg.epochs.saturating_sub(1), ema.clone()),
    };
    Ok(TrainOutcome {
        model,
        params,
        ema,
        best,
        best_epoch,
        log,
        optimizer: opt,
    })
}

/// Consecutive chunks of `order` of at most `size`, split wherever the
/// sequence length changes.
fn batches(order: &[usize], samples: &[EncodedSample], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &i in order {
        match out.last_mut() {
            Some(b) if b.len() < size && samples[b[0]].frames() == samples[i].frames() => b.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}
