//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is used to verify.

use crate::autograd::{Tape, Var};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Result, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over inputs: `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Compares analytic gradients of a scalar function of `inputs` against
/// central differences with step [`DEFAULT_STEP`].
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_with_step(inputs, DEFAULT_STEP, build)
}

pub fn check_gradients_with_step<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[idx].data()[i];
            work[idx].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[idx].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[idx].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
    })
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-8)
}

/// [`check_gradients`] over every tensor of `params`, with the build
/// function receiving them as a name-keyed [`Binding`]. `per_input` follows
/// the store's name order.
pub fn check_param_gradients<F>(params: &ParamStore, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Binding) -> Result<Var>,
{
    let names: Vec<&str> = params.names().collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    check_gradients(&inputs, |tape, vars| {
        let mut binding = Binding::default();
        for (name, var) in names.iter().zip(vars) {
            binding.insert(name, *var);
        }
        build(tape, &binding)
    })
}
