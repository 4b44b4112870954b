//! Post-norm Transformer encoder over the fused sequence.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{init_linear, linear, Binding, ParamStore};
use crate::tensor::{Result, Tensor};

/// `[T×d]` sinusoidal positions: `sin(t/10000^(2i/d))` on even features,
/// `cos` of the same angle on odd ones.
pub fn positional_encoding(frames: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; frames * width];
    for t in 0..frames {
        for j in 0..width {
            let pair = (j / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(pair / width as f64);
            data[t * width + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![frames, width], data).expect("T·d values")
}

/// Self-attention and a ReLU feed-forward block, each followed by a
/// residual add and an affine layer norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayer {
    pub name: String,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl EncoderLayer {
    fn p(&self, what: &str) -> String {
        format!("{}.{what}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for proj in ["query", "key", "value", "out"] {
            init_linear(store, &self.p(proj), self.width, self.width, rng);
        }
        init_linear(store, &self.p("ffn1"), self.width, self.ffn_hidden, rng);
        init_linear(store, &self.p("ffn2"), self.ffn_hidden, self.width, rng);
        for norm in ["norm1", "norm2"] {
            store.insert(self.p(&format!("{norm}.gain")), Tensor::ones(&[self.width]));
            store.insert(self.p(&format!("{norm}.bias")), Tensor::zeros(&[self.width]));
        }
    }

    fn norm(&self, tape: &mut Tape, params: &Binding, which: &str, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let n = tape.mul(n, params.var(&self.p(&format!("{which}.gain"))))?;
        tape.add(n, params.var(&self.p(&format!("{which}.bias"))))
    }

    /// Multi-head scaled dot-product self-attention on `[B×T×d]`.
    pub fn attention(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let q = linear(tape, params, &self.p("query"), x)?;
        let k = linear(tape, params, &self.p("key"), x)?;
        let v = linear(tape, params, &self.p("value"), x)?;
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice(q, 2, a, b)?;
            let kh = tape.slice(k, 2, a, b)?;
            let vh = tape.slice(v, 2, a, b)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.bmm(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores)?;
            heads.push(tape.bmm(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        linear(tape, params, &self.p("out"), joined)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let a = self.attention(tape, params, x)?;
        let x = tape.add(x, a)?;
        let x = self.norm(tape, params, "norm1", x)?;
        let f = linear(tape, params, &self.p("ffn1"), x)?;
        let f = tape.relu(f)?;
        let f = linear(tape, params, &self.p("ffn2"), f)?;
        let x = tape.add(x, f)?;
        self.norm(tape, params, "norm2", x)
    }
}
