use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Momentum buffers, allocated lazily for parameters that receive gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub momentum: f64,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }
}

/// `b ← μ·b + g; θ ← θ − η·b` for every parameter that has a gradient.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    opt: &mut OptimState,
    eta: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| TrainError::UnknownParameter(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        let buf = opt
            .buffers
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.numel()]);
        for ((b, &gi), theta) in buf.iter_mut().zip(g.data()).zip(p.data_mut()) {
            *b = opt.momentum * *b + gi;
            *theta -= eta * *b;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
