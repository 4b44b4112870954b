use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{EMOTION_NAMES, NUM_EMOTIONS};

/// Single-pass co-moment accumulator (Welford) for Pearson's ρ.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PearsonAccumulator {
    n: u64,
    mean_x: f64,
    mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    co: f64,
}

impl PearsonAccumulator {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        self.mean_x += dx / n;
        let dy = y - self.mean_y;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.co += dx * (y - self.mean_y);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// `None` when fewer than two pairs were seen or either side has zero
    /// variance.
    pub fn rho(&self) -> Option<f64> {
        if self.n < 2 || self.m2_x <= 0.0 || self.m2_y <= 0.0 {
            return None;
        }
        Some((self.co / (self.m2_x * self.m2_y).sqrt()).clamp(-1.0, 1.0))
    }
}

/// `cov(y, ŷ) / √(var(y)·var(ŷ))` with population moments.
pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.len() < 2 {
        return Err(EvalError::TooFewSamples(y.len()));
    }
    // Accumulating (min, max) as one pair keeps the result exactly symmetric
    // in its arguments.
    let mut acc = PearsonAccumulator::default();
    let mut rev = PearsonAccumulator::default();
    for (&a, &b) in y.iter().zip(yhat) {
        acc.push(a, b);
        rev.push(b, a);
    }
    match (acc.rho(), rev.rho()) {
        (Some(r1), Some(r2)) => Ok(0.5 * (r1 + r2)),
        _ => Err(EvalError::UndefinedCorrelation),
    }
}

/// Per-emotion correlations; undefined entries are `None` and left out of
/// the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonReport {
    pub rho_per_emotion: [Option<f64>; NUM_EMOTIONS],
    pub rho_mean: Option<f64>,
    pub n_samples: usize,
}

impl PearsonReport {
    pub fn from_predictions(
        targets: &[[f64; NUM_EMOTIONS]],
        predictions: &[[f64; NUM_EMOTIONS]],
    ) -> Result<Self, EvalError> {
        if targets.len() != predictions.len() {
            return Err(EvalError::LengthMismatch(targets.len(), predictions.len()));
        }
        if targets.is_empty() {
            return Err(EvalError::TooFewSamples(0));
        }
        let mut rho_per_emotion = [None; NUM_EMOTIONS];
        for (e, slot) in rho_per_emotion.iter_mut().enumerate() {
            let y: Vec<f64> = targets.iter().map(|t| t[e]).collect();
            let yhat: Vec<f64> = predictions.iter().map(|p| p[e]).collect();
            *slot = match pearson(&y, &yhat) {
                Ok(r) => Some(r),
                Err(EvalError::UndefinedCorrelation | EvalError::TooFewSamples(_)) => {
                    log::warn!("correlation for {} is undefined (constant values)", EMOTION_NAMES[e]);
                    None
                }
                Err(other) => return Err(other),
            };
        }
        Ok(Self::from_rhos(rho_per_emotion, targets.len()))
    }

    pub fn from_rhos(rho_per_emotion: [Option<f64>; NUM_EMOTIONS], n_samples: usize) -> Self {
        let defined: Vec<f64> = rho_per_emotion.iter().flatten().copied().collect();
        let rho_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self {
            rho_per_emotion,
            rho_mean,
            n_samples,
        }
    }

    pub fn undefined_count(&self) -> usize {
        self.rho_per_emotion.iter().filter(|r| r.is_none()).count()
    }
}
