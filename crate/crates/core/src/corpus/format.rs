//! EMIF binary feature files.
//!
//! ```text
//! "EMIF" | u32 version | u32 sample count
//! per sample:
//!   u32 id length | id bytes (UTF-8)
//!   3 × (u32 T | u32 D | f32 frame rate)      visual, audio, text
//!   6 × f32 target
//!   u32 corruption count | each: u8 modality, u8 kind, f64 strength,
//!                                u8 has span, u32 start, u32 end
//!   visual T·D f32 | audio T·D f32 | text T·D f32
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    CorpusError, CorruptionKind, CorruptionSpec, FeatureSequence, Modality, SampleBundle, NUM_EMOTIONS,
};
use crate::tensor::Tensor;

pub const EMIF_MAGIC: &[u8; 4] = b"EMIF";
pub const EMIF_VERSION: u32 = 1;

pub fn write_features(path: impl AsRef<Path>, samples: &[SampleBundle]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(samples)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<SampleBundle>, CorpusError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub(crate) fn encode(samples: &[SampleBundle]) -> Result<Vec<u8>, CorpusError> {
    let mut out = Vec::new();
    out.extend_from_slice(EMIF_MAGIC);
    out.extend_from_slice(&EMIF_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(samples.len())?.to_le_bytes());
    for s in samples {
        let id = s.id.as_bytes();
        out.extend_from_slice(&u32_of(id.len())?.to_le_bytes());
        out.extend_from_slice(id);
        for m in Modality::ALL {
            let seq = s.modality(m);
            out.extend_from_slice(&u32_of(seq.len())?.to_le_bytes());
            out.extend_from_slice(&u32_of(seq.dim())?.to_le_bytes());
            out.extend_from_slice(&(seq.frame_rate_hz as f32).to_le_bytes());
        }
        for v in s.target {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&u32_of(s.corruption.len())?.to_le_bytes());
        for c in &s.corruption {
            out.push(c.modality.code());
            out.push(c.kind.code());
            out.extend_from_slice(&c.strength.to_le_bytes());
            let (has, (a, b)) = match c.frame_span {
                Some(span) => (1u8, span),
                None => (0u8, (0, 0)),
            };
            out.push(has);
            out.extend_from_slice(&u32_of(a)?.to_le_bytes());
            out.extend_from_slice(&u32_of(b)?.to_le_bytes());
        }
        for m in Modality::ALL {
            for &v in s.modality(m).frames.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn u32_of(n: usize) -> Result<u32, CorpusError> {
    u32::try_from(n).map_err(|_| CorpusError::InvalidParameter(format!("{n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CorpusError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CorpusError::TruncatedPayload(format!(
                "need {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CorpusError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32, CorpusError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CorpusError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Vec<SampleBundle>, CorpusError> {
    if bytes.len() < 4 || &bytes[..4] != EMIF_MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != EMIF_VERSION {
        return Err(CorpusError::VersionMismatch {
            found: version,
            expected: EMIF_VERSION,
        });
    }
    let count = cur.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = cur.u32("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| CorpusError::InvalidHeader("sample id is not UTF-8".into()))?
            .to_string();
        let mut dims = [(0usize, 0usize, 0f64); 3];
        for d in dims.iter_mut() {
            let t = cur.u32("frame count")? as usize;
            let dim = cur.u32("feature dim")? as usize;
            let rate = cur.f32("frame rate")? as f64;
            *d = (t, dim, rate);
        }
        let mut target = [0.0; NUM_EMOTIONS];
        for v in target.iter_mut() {
            *v = cur.f32("target")? as f64;
        }
        let n_corrupt = cur.u32("corruption count")? as usize;
        let mut corruption = Vec::with_capacity(n_corrupt.min(64));
        for _ in 0..n_corrupt {
            let modality = Modality::from_code(cur.u8("corruption modality")?)
                .ok_or_else(|| CorpusError::InvalidHeader("unknown modality code".into()))?;
            let kind = CorruptionKind::from_code(cur.u8("corruption kind")?)
                .ok_or_else(|| CorpusError::InvalidHeader("unknown corruption kind".into()))?;
            let strength = cur.f64("corruption strength")?;
            let has_span = cur.u8("span flag")? != 0;
            let start = cur.u32("span start")? as usize;
            let end = cur.u32("span end")? as usize;
            corruption.push(CorruptionSpec {
                modality,
                kind,
                strength,
                frame_span: has_span.then_some((start, end)),
            });
        }
        let mut seqs = Vec::with_capacity(3);
        for (m, &(t, dim, rate)) in Modality::ALL.iter().zip(&dims) {
            let n = t.checked_mul(dim).ok_or_else(|| CorpusError::InvalidHeader("T·D overflows".into()))?;
            let raw = cur.take(n.checked_mul(4).unwrap_or(usize::MAX), "feature payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            seqs.push(FeatureSequence {
                modality: *m,
                frames: Tensor::new(vec![t, dim], data).expect("sizes agree"),
                frame_rate_hz: rate,
            });
        }
        let text = seqs.pop().expect("three sequences");
        let audio = seqs.pop().expect("three sequences");
        let visual = seqs.pop().expect("three sequences");
        samples.push(SampleBundle {
            id,
            visual,
            audio,
            text,
            target,
            corruption,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corrupt, generate_corpus};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut corpus = generate_corpus(4, 3, 6, (5, 7, 3)).unwrap();
        let spec = CorruptionSpec {
            modality: Modality::Visual,
            kind: CorruptionKind::GaussianNoise,
            strength: 0.3,
            frame_span: Some((1, 4)),
        };
        corpus[1] = corrupt(&corpus[1], &spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.emif");
        write_features(&path, &corpus).unwrap();
        assert_eq!(read_features(&path).unwrap(), corpus);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&generate_corpus(1, 1, 4, (2, 2, 2)).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CorpusError::BadMagic)));
        assert!(matches!(decode(b"EM"), Err(CorpusError::BadMagic)));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&generate_corpus(1, 1, 4, (2, 2, 2)).unwrap()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(CorpusError::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn header_larger_than_payload_is_truncation() {
        let bytes = encode(&generate_corpus(1, 1, 4, (2, 2, 2)).unwrap()).unwrap();
        // Visual T sits right after magic, version, count, id length and "s00000".
        let mut inflated = bytes.clone();
        let t_off = 4 + 4 + 4 + 4 + 6;
        inflated[t_off..t_off + 4].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(decode(&inflated), Err(CorpusError::TruncatedPayload(_))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut), Err(CorpusError::TruncatedPayload(_))));
    }
}
