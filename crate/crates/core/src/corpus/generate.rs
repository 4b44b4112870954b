use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{f32_exact, CorpusError, FeatureSequence, Modality, SampleBundle, NUM_EMOTIONS};
use crate::tensor::Tensor;

/// Per-modality noise. `nuisance` is a sample-level offset added to the
/// latent before mixing (it does not average out over time); `frame` is
/// i.i.d. per-frame feature noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub nuisance: [f64; 3],
    pub frame: [f64; 3],
}

impl NoiseLevels {
    pub const CLEAN: NoiseLevels = NoiseLevels {
        nuisance: [0.0; 3],
        frame: [0.0; 3],
    };
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            nuisance: [0.12, 0.12, 0.12],
            frame: [0.1, 0.1, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub frames: usize,
    /// `(D_v, D_a, D_s)`.
    pub dims: (usize, usize, usize),
    pub frame_rate_hz: f64,
    pub noise: NoiseLevels,
    /// Share of samples in which one frame-level modality (visual or audio,
    /// chosen at random) is unreliable: both its noise levels are multiplied
    /// by [`UNRELIABLE_SCALE`]. The extra frame jitter makes the problem
    /// visible in the features, while the larger sample-level offset makes
    /// the modality misleading. Zero (the default) leaves every sample
    /// as-is.
    #[serde(default)]
    pub unreliable_fraction: f64,
}

/// Noise multiplier for an unreliable modality.
pub const UNRELIABLE_SCALE: f64 = 4.0;

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 64,
            frames: 50,
            dims: (32, 48, 16),
            frame_rate_hz: 5.0,
            noise: NoiseLevels::default(),
            unreliable_fraction: 0.0,
        }
    }
}

impl CorpusConfig {
    pub fn new(seed: u64, n_samples: usize, frames: usize, dims: (usize, usize, usize)) -> Self {
        Self {
            seed,
            n_samples,
            frames,
            dims,
            ..Self::default()
        }
    }

    pub fn with_noise(mut self, noise: NoiseLevels) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_unreliable_fraction(mut self, fraction: f64) -> Self {
        self.unreliable_fraction = fraction;
        self
    }
}

/// Amplitude of the latent wave around the per-sample base level.
const WAVE_SCALE: f64 = 0.15;
/// Amplitude of the fast oscillation audio sees on top of the latent.
const AUDIO_FAST_SCALE: f64 = 0.1;

/// Generates `n_samples` bundles with the default noise levels.
pub fn generate_corpus(
    seed: u64,
    n_samples: usize,
    frames: usize,
    dims: (usize, usize, usize),
) -> Result<Vec<SampleBundle>, CorpusError> {
    CorpusConfig::new(seed, n_samples, frames, dims).generate()
}

impl CorpusConfig {
    /// Deterministic in the config. Sample `i` draws from its own RNG stream,
    /// so a longer corpus with the same seed extends a shorter one.
    pub fn generate(&self) -> Result<Vec<SampleBundle>, CorpusError> {
        let (dv, da, ds) = self.dims;
        if self.n_samples == 0 {
            return Err(CorpusError::InvalidParameter("n_samples must be at least 1".into()));
        }
        if self.frames < 4 {
            return Err(CorpusError::InvalidParameter("T must be at least 4".into()));
        }
        if dv == 0 || da == 0 || ds == 0 {
            return Err(CorpusError::InvalidParameter("feature dims must be positive".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(CorpusError::InvalidParameter("frame rate must be positive".into()));
        }
        let levels = self.noise.nuisance.iter().chain(&self.noise.frame);
        if levels.clone().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(CorpusError::InvalidParameter("noise levels must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.unreliable_fraction) {
            return Err(CorpusError::InvalidParameter("unreliable fraction must be in [0,1]".into()));
        }

        let mut mix_rng = ChaCha8Rng::seed_from_u64(self.seed);
        mix_rng.set_stream(0);
        let mixing = Mixing {
            visual: mixing_matrix(dv, &mut mix_rng),
            audio: mixing_matrix(da, &mut mix_rng),
            audio_fast: mixing_matrix(da, &mut mix_rng),
            text: mixing_matrix(ds, &mut mix_rng),
        };

        (0..self.n_samples)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64 + 1);
                self.sample(i, &mixing, &mut rng)
            })
            .collect()
    }

    fn sample(&self, index: usize, mixing: &Mixing, rng: &mut ChaCha8Rng) -> Result<SampleBundle, CorpusError> {
        let t_len = self.frames;
        let (dv, da, ds) = self.dims;
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");

        // Latent z(t): base level plus three low-frequency sinusoids per
        // dimension, with |Σ| ≤ 1 so z stays inside [0,1].
        let mut latent = vec![[0.0; NUM_EMOTIONS]; t_len];
        for k in 0..NUM_EMOTIONS {
            let base = rng.gen_range(0.15..0.85);
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.0..1.0 / 3.0),
                        rng.gen_range(0.3..2.0),
                        rng.gen_range(0.0..TAU),
                    )
                })
                .collect();
            for (t, z) in latent.iter_mut().enumerate() {
                let phase = t as f64 / t_len as f64;
                let s: f64 = waves.iter().map(|(a, f, p)| a * (TAU * f * phase + p).sin()).sum();
                z[k] = (base + WAVE_SCALE * s).clamp(0.0, 1.0);
            }
        }
        let mut target = [0.0; NUM_EMOTIONS];
        for (k, slot) in target.iter_mut().enumerate() {
            let mean = latent.iter().map(|z| z[k]).sum::<f64>() / t_len as f64;
            *slot = f32_exact(mean.clamp(0.0, 1.0));
        }

        let nuisance = |sigma: f64, rng: &mut ChaCha8Rng| -> [f64; NUM_EMOTIONS] {
            let mut n = [0.0; NUM_EMOTIONS];
            n.iter_mut().for_each(|v| *v = sigma * std_normal.sample(rng));
            n
        };
        // Only draws when enabled, so reliable corpora keep their streams.
        let mut scale = [1.0; 2];
        if self.unreliable_fraction > 0.0 && rng.gen_bool(self.unreliable_fraction) {
            scale[rng.gen_range(0..2)] = UNRELIABLE_SCALE;
        }
        let n_v = nuisance(self.noise.nuisance[0] * scale[0], rng);
        let n_a = nuisance(self.noise.nuisance[1] * scale[1], rng);
        let n_s = nuisance(self.noise.nuisance[2], rng);

        let fast_freq: Vec<f64> = (0..NUM_EMOTIONS).map(|_| rng.gen_range(6.0..12.0)).collect();
        let fast_phase: Vec<f64> = (0..NUM_EMOTIONS).map(|_| rng.gen_range(0.0..TAU)).collect();

        let mut visual = Vec::with_capacity(t_len * dv);
        let mut audio = Vec::with_capacity(t_len * da);
        for (t, z) in latent.iter().enumerate() {
            let phase = t as f64 / t_len as f64;
            let zv: Vec<f64> = (0..NUM_EMOTIONS).map(|k| z[k] + n_v[k]).collect();
            let za: Vec<f64> = (0..NUM_EMOTIONS).map(|k| z[k] + n_a[k]).collect();
            let fast: Vec<f64> = (0..NUM_EMOTIONS)
                .map(|k| AUDIO_FAST_SCALE * (TAU * fast_freq[k] * phase + fast_phase[k]).sin())
                .collect();
            for j in 0..dv {
                let clean = mix(&zv, &mixing.visual, dv, j);
                visual.push(f32_exact(clean + self.noise.frame[0] * scale[0] * std_normal.sample(rng)));
            }
            for j in 0..da {
                let clean = mix(&za, &mixing.audio, da, j) + mix(&fast, &mixing.audio_fast, da, j);
                audio.push(f32_exact(clean + self.noise.frame[1] * scale[1] * std_normal.sample(rng)));
            }
        }
        let zs: Vec<f64> = (0..NUM_EMOTIONS)
            .map(|k| latent.iter().map(|z| z[k]).sum::<f64>() / t_len as f64 + n_s[k])
            .collect();
        let text: Vec<f64> = (0..ds)
            .map(|j| f32_exact(mix(&zs, &mixing.text, ds, j) + self.noise.frame[2] * std_normal.sample(rng)))
            .collect();

        let seq = |modality, frames, dim, data| FeatureSequence {
            modality,
            frames: Tensor::new(vec![frames, dim], data).expect("generated sizes agree"),
            frame_rate_hz: f32_exact(self.frame_rate_hz),
        };
        Ok(SampleBundle {
            id: format!("s{:05}", index),
            visual: seq(Modality::Visual, t_len, dv, visual),
            audio: seq(Modality::Audio, t_len, da, audio),
            text: seq(Modality::Text, 1, ds, text),
            target,
            corruption: Vec::new(),
        })
    }
}

struct Mixing {
    visual: Vec<f64>,
    audio: Vec<f64>,
    audio_fast: Vec<f64>,
    text: Vec<f64>,
}

/// Row-major `[6×D]` map with N(0, 1/6) entries.
fn mixing_matrix(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0 / (NUM_EMOTIONS as f64).sqrt()).expect("valid normal");
    (0..NUM_EMOTIONS * dim).map(|_| normal.sample(rng)).collect()
}

fn mix(latent: &[f64], matrix: &[f64], dim: usize, column: usize) -> f64 {
    latent.iter().enumerate().map(|(k, z)| z * matrix[k * dim + column]).sum()
}

/// Averages fixed-width audio windows into video frames.
///
/// Window `w` covers `[w·window_s, (w+1)·window_s)`; it is assigned to the
/// frame whose interval `[t/fps, (t+1)/fps)` contains its start. Frames that
/// receive no window repeat the previous frame (zeros for the first).
pub fn align_audio_windows(
    windows: &Tensor,
    window_s: f64,
    frame_rate_hz: f64,
    n_frames: usize,
) -> Result<Tensor, CorpusError> {
    if windows.rank() != 2 {
        return Err(CorpusError::InvalidParameter("audio windows must be [N×D]".into()));
    }
    if !(window_s > 0.0) || !(frame_rate_hz > 0.0) {
        return Err(CorpusError::InvalidParameter("window and frame rate must be positive".into()));
    }
    let (n, d) = (windows.shape()[0], windows.shape()[1]);
    let mut sums = vec![0.0; n_frames * d];
    let mut counts = vec![0usize; n_frames];
    for w in 0..n {
        // Small epsilon keeps windows that start exactly on a frame boundary
        // from slipping into the previous frame through rounding.
        let frame = ((w as f64 * window_s) * frame_rate_hz + 1e-9).floor() as usize;
        if frame >= n_frames {
            break;
        }
        counts[frame] += 1;
        for (s, v) in sums[frame * d..(frame + 1) * d].iter_mut().zip(windows.row(w)) {
            *s += v;
        }
    }
    for t in 0..n_frames {
        if counts[t] > 0 {
            let inv = 1.0 / counts[t] as f64;
            sums[t * d..(t + 1) * d].iter_mut().for_each(|s| *s *= inv);
        } else if t > 0 {
            let (prev, cur) = sums.split_at_mut(t * d);
            cur[..d].copy_from_slice(&prev[(t - 1) * d..]);
        }
    }
    Ok(Tensor::new(vec![n_frames, d], sums).expect("sizes agree"))
}
