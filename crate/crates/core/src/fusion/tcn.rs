//! Visual temporal path: stacked causal dilated convolutions.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{init_linear, linear, uniform_fan_in, Binding, ParamStore};
use crate::tensor::{Result, Tensor};

/// Input projection to `channels`, then `layers` residual blocks
/// `h ← h + relu(conv_d(h) + b)` with dilation `2^(k−1)` for block k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcnStack {
    pub name: String,
    pub input_dim: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl TcnStack {
    pub fn dilation(&self, layer: usize) -> usize {
        1 << layer
    }

    /// `1 + (k_w − 1)·Σ d_k`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * (0..self.layers).map(|k| self.dilation(k)).sum::<usize>()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        init_linear(store, &format!("{}.proj", self.name), self.input_dim, self.channels, rng);
        let fan_in = self.kernel * self.channels;
        for k in 0..self.layers {
            store.insert(
                self.kernel_name(k),
                uniform_fan_in(&[self.kernel, self.channels, self.channels], fan_in, rng),
            );
            store.insert(self.bias_name(k), uniform_fan_in(&[self.channels], fan_in, rng));
        }
    }

    pub fn kernel_name(&self, layer: usize) -> String {
        format!("{}.{layer}.kernel", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.name)
    }

    /// `[T×D]` or `[B×T×D]` to the same layout with `channels` features.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let mut h = linear(tape, params, &format!("{}.proj", self.name), x)?;
        for k in 0..self.layers {
            let c = tape.dilated_conv1d(h, params.var(&self.kernel_name(k)), self.dilation(k))?;
            let c = tape.add(c, params.var(&self.bias_name(k)))?;
            let c = tape.relu(c)?;
            h = tape.add(h, c)?;
        }
        Ok(h)
    }
}

/// Forward-only evaluation of `stack` on one `[T×D_v]` sequence.
pub fn tcn_forward(v_feats: &Tensor, stack: &TcnStack, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, false);
    let x = tape.constant(v_feats.clone());
    let y = stack.forward(&mut tape, &binding, x)?;
    Ok(tape.value(y).clone())
}
