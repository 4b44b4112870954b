//! Optimisation pieces shared by both stages and the Stage-II training loop.

mod ema;
mod loss;
mod optim;
mod schedule;
mod stage2;

pub use ema::{ema_update, EmaState};
pub use loss::{mse_loss, mse_on_tape};
pub use optim::{clip_grad_norm, sgd_momentum_step, OptimState};
pub use schedule::{cosine_eta, ScheduleState};
pub use stage2::{evaluate_encoded, train_stage2, EpochLog, TrainOutcome};

use thiserror::Error;

use crate::params::ParamError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no parameter named `{0}`")]
    UnknownParameter(String),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("EMA shadow used before initialisation")]
    EmaUninitialized,
    #[error("prediction has {pred} values, target has {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NumericFailure {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Deterministic hold-out split: a seeded shuffle, then the last
/// `round(fraction·n)` items (at most `n − 1`) form the validation part.
/// Both parts keep the original relative order.
pub fn split_holdout<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let n = items.len();
    let n_val = ((n as f64 * fraction.clamp(0.0, 1.0)).round() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[n - n_val..] {
        is_val[i] = true;
    }
    let pick = |want: bool| items.iter().zip(&is_val).filter(|(_, &v)| v == want).map(|(x, _)| x.clone()).collect();
    (pick(false), pick(true))
}
