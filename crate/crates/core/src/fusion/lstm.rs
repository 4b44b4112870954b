//! Audio temporal path: a bidirectional LSTM.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{uniform_fan_in, Binding, ParamStore};
use crate::tensor::{Result, Tensor};

pub const FORGET_BIAS: f64 = 1.0;

/// Two independent LSTM cells (forward and reversed time). Gate blocks in
/// the `4H` axis are ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLstm {
    pub name: String,
    pub input_dim: usize,
    pub hidden: usize,
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

impl BiLstm {
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    fn pname(&self, dir: &str, what: &str) -> String {
        format!("{}.{dir}.{what}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let h = self.hidden;
        for dir in DIRECTIONS {
            store.insert(self.pname(dir, "w_input"), uniform_fan_in(&[self.input_dim, 4 * h], h, rng));
            store.insert(self.pname(dir, "w_hidden"), uniform_fan_in(&[h, 4 * h], h, rng));
            let mut bias = vec![0.0; 4 * h];
            bias[h..2 * h].iter_mut().for_each(|b| *b = FORGET_BIAS);
            store.insert(self.pname(dir, "bias"), Tensor::new(vec![4 * h], bias).expect("4H values"));
        }
    }

    /// `[B×T×D]` to `[B×T×2H]`, forward states first.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let fwd = self.run(tape, params, x, "fwd", false)?;
        let bwd = self.run(tape, params, x, "bwd", true)?;
        tape.concat(&[fwd, bwd], 2)
    }

    fn run(&self, tape: &mut Tape, params: &Binding, x: Var, dir: &str, reverse: bool) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t_len) = (shape[0], shape[1]);
        let h = self.hidden;
        let pre = tape.matmul(x, params.var(&self.pname(dir, "w_input")))?;
        let pre = tape.add(pre, params.var(&self.pname(dir, "bias")))?;
        let w_hidden = params.var(&self.pname(dir, "w_hidden"));

        let mut state: Option<(Var, Var)> = None;
        let mut outputs = vec![None; t_len];
        let steps: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in steps {
            let z = tape.slice(pre, 1, t, t + 1)?;
            let mut z = tape.reshape(z, &[b, 4 * h])?;
            if let Some((h_prev, _)) = state {
                let rec = tape.matmul(h_prev, w_hidden)?;
                z = tape.add(z, rec)?;
            }
            let gates = tape.sigmoid(z)?;
            let i = tape.slice(gates, 1, 0, h)?;
            let o = tape.slice(gates, 1, 3 * h, 4 * h)?;
            let g = tape.slice(z, 1, 2 * h, 3 * h)?;
            let g = tape.tanh(g)?;
            let mut c = tape.mul(i, g)?;
            if let Some((_, c_prev)) = state {
                let f = tape.slice(gates, 1, h, 2 * h)?;
                let keep = tape.mul(f, c_prev)?;
                c = tape.add(keep, c)?;
            }
            let tc = tape.tanh(c)?;
            let h_new = tape.mul(o, tc)?;
            outputs[t] = Some(tape.reshape(h_new, &[b, 1, h])?);
            state = Some((h_new, c));
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step ran")).collect();
        tape.concat(&outputs, 1)
    }
}

/// Forward-only evaluation on one `[T×D_a]` sequence; returns `[T×2H]`.
pub fn bilstm_forward(a_feats: &Tensor, lstm: &BiLstm, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, false);
    let shape = a_feats.shape();
    let x = tape.constant(a_feats.reshape(&[1, shape[0], shape[1]])?);
    let y = lstm.forward(&mut tape, &binding, x)?;
    tape.value(y).reshape(&[shape[0], lstm.output_dim()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lstm(d: usize, h: usize) -> BiLstm {
        BiLstm {
            name: "lstm".into(),
            input_dim: d,
            hidden: h,
        }
    }

    fn params(l: &BiLstm, seed: u64) -> ParamStore {
        let mut p = ParamStore::new();
        l.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    #[test]
    fn zero_input_and_bias_gives_zero_output() {
        let l = lstm(3, 4);
        let mut p = params(&l, 1);
        for dir in DIRECTIONS {
            p.insert(l.pname(dir, "bias"), Tensor::zeros(&[16]));
        }
        let y = bilstm_forward(&Tensor::zeros(&[6, 3]), &l, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_is_one() {
        let l = lstm(2, 3);
        let p = params(&l, 1);
        assert_eq!(p.get("lstm.fwd.bias").unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_step_halves_match_with_shared_weights() {
        let l = lstm(3, 4);
        let mut p = params(&l, 2);
        for what in ["w_input", "w_hidden", "bias"] {
            let w = p.get(&l.pname("fwd", what)).unwrap().clone();
            p.insert(l.pname("bwd", what), w);
        }
        let x = uniform_fan_in(&[1, 3], 1, &mut ChaCha8Rng::seed_from_u64(3));
        let y = bilstm_forward(&x, &l, &p).unwrap();
        assert_eq!(&y.data()[..4], &y.data()[4..]);
    }

    #[test]
    fn time_reversal_swaps_directions() {
        let l = lstm(3, 4);
        let mut p = params(&l, 4);
        for what in ["w_input", "w_hidden", "bias"] {
            let w = p.get(&l.pname("fwd", what)).unwrap().clone();
            p.insert(l.pname("bwd", what), w);
        }
        let x = uniform_fan_in(&[7, 3], 1, &mut ChaCha8Rng::seed_from_u64(5));
        let mut xr = x.clone();
        for t in 0..7 {
            xr.data_mut()[t * 3..t * 3 + 3].copy_from_slice(x.row(6 - t));
        }
        let y = bilstm_forward(&x, &l, &p).unwrap();
        let yr = bilstm_forward(&xr, &l, &p).unwrap();
        for t in 0..7 {
            let (a, b) = (y.row(t), yr.row(6 - t));
            for j in 0..4 {
                assert!((a[j] - b[4 + j]).abs() < 1e-14);
                assert!((a[4 + j] - b[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_over_five_steps() {
        let l = lstm(2, 3);
        let mut p = params(&l, 6);
        p.insert("x", uniform_fan_in(&[1, 5, 2], 1, &mut ChaCha8Rng::seed_from_u64(7)));
        let report = check_param_gradients(&p, |tape, b| {
            let y = l.forward(tape, b, b.var("x"))?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
