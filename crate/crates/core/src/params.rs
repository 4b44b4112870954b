//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Verifies that every name in `template` exists here with the same shape.
    pub fn check_matches(&self, template: &ParamStore) -> Result<(), ParamError> {
        for (name, t) in template.iter() {
            let mine = self.get(name)?;
            if mine.shape() != t.shape() {
                return Err(ParamError::Shape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    actual: mine.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Copies every parameter onto `tape`; tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        self.bind_where(tape, |_| trainable)
    }

    /// Copies every parameter onto `tape`, tracking those accepted by `trainable`.
    pub fn bind_where(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let t = t.clone().with_requires_grad(trainable(name));
                (name.clone(), tape.leaf(t))
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles for a [`ParamStore`], looked up by name during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    /// Binds `name` to an existing tape variable.
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects the gradient of every bound parameter that received one.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialisation.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Adds `name.weight` `[fan_in×fan_out]` and `name.bias` `[fan_out]`.
pub fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), uniform_fan_in(&[fan_in, fan_out], fan_in, rng));
    store.insert(format!("{name}.bias"), uniform_fan_in(&[fan_out], fan_in, rng));
}

/// `x · W + b` for a linear layer registered with [`init_linear`].
pub fn linear(tape: &mut Tape, params: &Binding, name: &str, x: Var) -> crate::tensor::Result<Var> {
    let y = tape.matmul(x, params.var(&format!("{name}.weight")))?;
    tape.add(y, params.var(&format!("{name}.bias")))
}
