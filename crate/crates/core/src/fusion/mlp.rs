use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{init_linear, linear, Binding, ParamStore};
use crate::tensor::{Result, Tensor};

/// `l2(tanh(l1(x)))` over the trailing axis; the tanh can be switched off.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub tanh: bool,
}

impl Mlp {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            name: name.into(),
            input_dim,
            hidden_dim,
            output_dim,
            tanh: true,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        init_linear(store, &format!("{}.l1", self.name), self.input_dim, self.hidden_dim, rng);
        init_linear(store, &format!("{}.l2", self.name), self.hidden_dim, self.output_dim, rng);
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let mut h = linear(tape, params, &format!("{}.l1", self.name), x)?;
        if self.tanh {
            h = tape.tanh(h)?;
        }
        linear(tape, params, &format!("{}.l2", self.name), h)
    }
}

/// Forward-only projection of `[…×C_in]` features into the shared width.
pub fn modality_map(h: &Tensor, mlp: &Mlp, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, false);
    let x = tape.constant(h.clone());
    let y = mlp.forward(&mut tape, &binding, x)?;
    Ok(tape.value(y).clone())
}
