//! Annotation records and the structured prompt built from them.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, SampleBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionClass {
    Neutral,
    Angry,
    Disgusted,
    Fearful,
    Happy,
    Sad,
    Surprised,
    Other,
}

impl fmt::Display for ExpressionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExpressionClass::Neutral => "Neutral",
            ExpressionClass::Angry => "Angry",
            ExpressionClass::Disgusted => "Disgusted",
            ExpressionClass::Fearful => "Fearful",
            ExpressionClass::Happy => "Happy",
            ExpressionClass::Sad => "Sad",
            ExpressionClass::Surprised => "Surprised",
            ExpressionClass::Other => "Other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntensityLevel {
    Low,
    Medium,
    High,
}

impl fmt::Display for IntensityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// FACS action unit, identified by its number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionUnit(pub u32);

impl ActionUnit {
    pub fn name(self) -> &'static str {
        au_name(self.0)
    }
}

impl fmt::Display for ActionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{} ({})", self.0, self.name())
    }
}

const AU_NAMES: [(u32, &str); 17] = [
    (1, "Inner Brow Raiser"),
    (2, "Outer Brow Raiser"),
    (4, "Brow Lowerer"),
    (5, "Upper Lid Raiser"),
    (6, "Cheek Raiser"),
    (7, "Lid Tightener"),
    (9, "Nose Wrinkler"),
    (10, "Upper Lip Raiser"),
    (12, "Lip Corner Puller"),
    (14, "Dimpler"),
    (15, "Lip Corner Depressor"),
    (17, "Chin Raiser"),
    (20, "Lip Stretcher"),
    (23, "Lip Tightener"),
    (25, "Lips Part"),
    (26, "Jaw Drop"),
    (45, "Blink"),
];

pub fn au_name(id: u32) -> &'static str {
    AU_NAMES
        .iter()
        .find(|(n, _)| *n == id)
        .map_or("Unknown", |(_, name)| name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Sample this record describes.
    pub id: String,
    #[serde(rename = "class")]
    pub expression_class: ExpressionClass,
    #[serde(rename = "intensity")]
    pub intensity_label: IntensityLevel,
    #[serde(rename = "aus")]
    pub au_codes: Vec<ActionUnit>,
    pub valence: f64,
    pub arousal: f64,
    #[serde(rename = "va_std")]
    pub va_stddev: f64,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.au_codes.is_empty() {
            return Err(CorpusError::EmptyActionUnits);
        }
        if !(-1.0..=1.0).contains(&self.valence) || !(-1.0..=1.0).contains(&self.arousal) {
            return Err(CorpusError::InvalidParameter(format!(
                "valence/arousal ({}, {}) outside [-1,1]",
                self.valence, self.arousal
            )));
        }
        if !(self.va_stddev >= 0.0) {
            return Err(CorpusError::InvalidParameter("va_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// `"{Class} (Intensity: {Level}) with AUa (Name) and AUb (Name), Valence=v, Arousal=a"`.
pub fn render_prompt(rec: &AnnotationRecord) -> Result<String, CorpusError> {
    rec.validate()?;
    let aus: Vec<String> = rec.au_codes.iter().map(ToString::to_string).collect();
    Ok(format!(
        "{} (Intensity: {}) with {}, Valence={:.2}, Arousal={:.2}",
        rec.expression_class,
        rec.intensity_label,
        aus.join(" and "),
        rec.valence,
        rec.arousal
    ))
}

const EMOTION_AUS: [&[u32]; 6] = [
    &[1, 2],      // admiration
    &[12, 25],    // amusement
    &[4, 23],     // determination
    &[1, 4, 15],  // empathic pain
    &[5, 26],     // excitement
    &[6, 12],     // joy
];

/// Derives a synthetic annotation from a sample's intensity targets.
///
/// Valence/arousal are fixed linear read-outs of the targets rounded to two
/// decimals; the VA spread is drawn from a per-sample seeded stream.
pub fn annotate(sample: &SampleBundle, seed: u64) -> AnnotationRecord {
    let y = &sample.target;
    let round2 = |v: f64| (v.clamp(-1.0, 1.0) * 100.0).round() / 100.0;
    let positive = (y[0] + y[1] + y[4] + y[5]) / 4.0;
    let valence = round2(2.0 * (positive - y[3]));
    let arousal = round2((y[1] + y[2] + y[4]) / 1.5 - 1.0);

    let (dominant, peak) = y
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let expression_class = if peak < 0.35 {
        ExpressionClass::Neutral
    } else {
        match dominant {
            0 => ExpressionClass::Surprised,
            1 | 5 => ExpressionClass::Happy,
            2 => ExpressionClass::Angry,
            3 if arousal > 0.2 => ExpressionClass::Fearful,
            3 => ExpressionClass::Sad,
            _ if valence < 0.0 => ExpressionClass::Other,
            _ => ExpressionClass::Surprised,
        }
    };
    let intensity_label = match peak {
        p if p < 0.45 => IntensityLevel::Low,
        p if p < 0.7 => IntensityLevel::Medium,
        _ => IntensityLevel::High,
    };
    // AUs of the dominant emotion, plus the runner-up's when it is also strong.
    let mut ranked: Vec<usize> = (0..y.len()).collect();
    ranked.sort_by(|&a, &b| y[b].total_cmp(&y[a]));
    let mut aus: Vec<u32> = EMOTION_AUS[dominant].to_vec();
    if y[ranked[1]] > 0.6 {
        aus.extend_from_slice(EMOTION_AUS[ranked[1]]);
    }
    aus.sort_unstable();
    aus.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(sample.id.as_bytes()));
    AnnotationRecord {
        id: sample.id.clone(),
        expression_class,
        intensity_label,
        au_codes: aus.into_iter().map(ActionUnit).collect(),
        valence,
        arousal,
        va_stddev: (rng.gen_range(0.0..0.4f64) * 1000.0).round() / 1000.0,
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Writes one JSON object per line.
pub fn write_annotations(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CorpusError::Annotation {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Annotation {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| CorpusError::Annotation {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
