//! Temporal feature enhancement: segment pooling for the visual stream and
//! difference-gated attention for the audio stream.

use std::sync::Arc;

use rand::Rng;

use super::FusionError;
use crate::autograd::{Tape, Var};
use crate::params::{uniform_fan_in, Binding, ParamStore};
use crate::tensor::{Result, Tensor};

/// `M` ordered half-open ranges covering `[0, T)`; sizes differ by at most
/// one, larger segments first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub frames: usize,
    pub boundaries: Vec<(usize, usize)>,
}

impl SegmentPlan {
    pub fn new(frames: usize, segments: usize) -> std::result::Result<Self, FusionError> {
        if segments == 0 || segments > frames {
            return Err(FusionError::InvalidSegments { segments, frames });
        }
        let (base, extra) = (frames / segments, frames % segments);
        let mut boundaries = Vec::with_capacity(segments);
        let mut start = 0;
        for m in 0..segments {
            let len = base + usize::from(m < extra);
            boundaries.push((start, start + len));
            start += len;
        }
        Ok(Self { frames, boundaries })
    }

    pub fn segments(&self) -> usize {
        self.boundaries.len()
    }

    /// `[M×T]` averaging matrix.
    pub fn pool_matrix(&self) -> Tensor {
        let t = self.frames;
        let mut data = vec![0.0; self.segments() * t];
        for (m, &(a, b)) in self.boundaries.iter().enumerate() {
            let w = 1.0 / (b - a) as f64;
            data[m * t + a..m * t + b].iter_mut().for_each(|x| *x = w);
        }
        Tensor::new(vec![self.segments(), t], data).expect("M·T values")
    }

    /// `[T×T]` matrix replacing each frame by the mean of its segment.
    pub fn smoothing_matrix(&self) -> Tensor {
        let t = self.frames;
        let mut data = vec![0.0; t * t];
        for &(a, b) in &self.boundaries {
            let w = 1.0 / (b - a) as f64;
            for row in a..b {
                data[row * t + a..row * t + b].iter_mut().for_each(|x| *x = w);
            }
        }
        Tensor::new(vec![t, t], data).expect("T·T values")
    }
}

/// Segment means `[M×C]` and their per-frame upsampling `[T×C]`.
pub fn segment_pool(h_v: &Tensor, plan: &SegmentPlan) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(h_v.clone());
    let pooled = tape.time_mix(x, Arc::new(plan.pool_matrix()))?;
    let upsampled = tape.time_mix(x, Arc::new(plan.smoothing_matrix()))?;
    Ok((tape.value(pooled).clone(), tape.value(upsampled).clone()))
}

/// `[T×T]` first-difference operator with a zero first row.
pub fn difference_matrix(frames: usize) -> Tensor {
    let mut d = Tensor::zeros(&[frames, frames]);
    for t in 1..frames {
        d.data_mut()[t * frames + t] = 1.0;
        d.data_mut()[t * frames + t - 1] = -1.0;
    }
    d
}

/// Gate `σ([h ‖ Δh]·W)` applied elementwise to `h`; no bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DifferenceGate {
    pub name: String,
    pub width: usize,
}

impl DifferenceGate {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let w = uniform_fan_in(&[2 * self.width, self.width], 2 * self.width, rng);
        store.insert(self.weight_name(), w);
    }

    /// `[T×W]` or `[B×T×W]` in, same shape out.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, h: Var) -> Result<Var> {
        let shape = tape.value(h).shape().to_vec();
        let t = shape[shape.len() - 2];
        let dh = tape.time_mix(h, Arc::new(difference_matrix(t)))?;
        let joint = tape.concat(&[h, dh], shape.len() - 1)?;
        let logits = tape.matmul(joint, params.var(&self.weight_name()))?;
        let alpha = tape.sigmoid(logits)?;
        tape.mul(alpha, h)
    }
}

/// Forward-only gate on one `[T×W]` sequence with weight `[2W×W]`.
pub fn gated_attention(h_a: &Tensor, w_g: &Tensor) -> Result<Tensor> {
    let gate = DifferenceGate {
        name: "gate".into(),
        width: h_a.last_dim(),
    };
    let mut tape = Tape::new();
    let mut binding = Binding::default();
    let w = tape.constant(w_g.clone());
    binding.insert(&gate.weight_name(), w);
    let x = tape.constant(h_a.clone());
    let y = gate.forward(&mut tape, &binding, x)?;
    Ok(tape.value(y).clone())
}
