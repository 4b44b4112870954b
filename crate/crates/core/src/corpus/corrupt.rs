use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{f32_exact, CorpusError, CorruptionKind, CorruptionSpec, Modality, SampleBundle};

/// Returns a copy of `sample` with one modality degraded. The target is
/// never touched.
///
/// - `GaussianNoise` adds N(0, strength²·σ²), σ being the per-feature
///   standard deviation over the sample's frames (over all entries when the
///   sequence has a single frame).
/// - `OcclusionMask` scales the span by `1 − strength`; strength 1 zeros it.
/// - `DropoutFrames` zeros each frame of the span with probability `strength`.
pub fn corrupt(sample: &SampleBundle, spec: &CorruptionSpec, seed: u64) -> Result<SampleBundle, CorpusError> {
    if !(0.0..=1.0).contains(&spec.strength) {
        return Err(CorpusError::InvalidParameter(format!(
            "corruption strength {} outside [0,1]",
            spec.strength
        )));
    }
    let mut out = sample.clone();
    let seq = out.modality_mut(spec.modality);
    let (t_len, dim) = (seq.len(), seq.dim());
    let (start, end) = spec.frame_span.unwrap_or((0, t_len));
    if start >= end || end > t_len {
        return Err(CorpusError::SpanOutOfRange {
            start,
            end,
            len: t_len,
        });
    }
    out.corruption.push(*spec);
    if spec.strength == 0.0 {
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = out.modality_mut(spec.modality);
    let data = seq.frames.data_mut();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let stds = feature_stds(data, t_len, dim);
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            for t in start..end {
                for j in 0..dim {
                    let x = &mut data[t * dim + j];
                    *x = f32_exact(*x + spec.strength * stds[j] * normal.sample(&mut rng));
                }
            }
        }
        CorruptionKind::OcclusionMask => {
            let keep = 1.0 - spec.strength;
            for x in &mut data[start * dim..end * dim] {
                *x = f32_exact(*x * keep);
            }
        }
        CorruptionKind::DropoutFrames => {
            for t in start..end {
                if rng.gen_bool(spec.strength) {
                    data[t * dim..(t + 1) * dim].iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Occludes one random span of one random frame-level modality (visual or
/// audio) in each sample with probability `fraction`. Spans cover 30–70% of
/// the sequence. This mimics per-clip occlusion and dropouts, so only part
/// of a corpus is affected and the affected parts differ from clip to clip.
pub fn degrade_random(samples: &[SampleBundle], fraction: f64, seed: u64) -> Result<Vec<SampleBundle>, CorpusError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CorpusError::InvalidParameter(format!("corrupt fraction {fraction} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            if !rng.gen_bool(fraction) {
                return Ok(s.clone());
            }
            let modality = if rng.gen_bool(0.5) { Modality::Visual } else { Modality::Audio };
            let t = s.frames();
            let len = ((t as f64 * rng.gen_range(0.3..0.7)).round() as usize).clamp(1, t);
            let start = rng.gen_range(0..=t - len);
            let (kind, strength) = match modality {
                Modality::Visual => (CorruptionKind::OcclusionMask, 1.0),
                _ => (CorruptionKind::DropoutFrames, 0.5),
            };
            let spec = CorruptionSpec {
                modality,
                kind,
                strength,
                frame_span: Some((start, start + len)),
            };
            corrupt(s, &spec, rng.gen())
        })
        .collect()
}

fn feature_stds(data: &[f64], t_len: usize, dim: usize) -> Vec<f64> {
    if t_len < 2 {
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        return vec![std; dim];
    }
    (0..dim)
        .map(|j| {
            let col = (0..t_len).map(|t| data[t * dim + j]);
            let mean = col.clone().sum::<f64>() / t_len as f64;
            (col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / t_len as f64).sqrt()
        })
        .collect()
}
