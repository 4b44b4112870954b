//! Ablation sweeps over modality subsets and module toggles.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::align::FrozenEncoders;
use crate::config::{Config, ConfigError, ModalitySet};
use crate::corpus::{corrupt, CorpusError, CorruptionKind, CorruptionSpec, Modality, SampleBundle};
use crate::fusion::{encode_corpus, EncodedSample, FusionError, QualityWeights};
use crate::train::{evaluate_encoded, train_stage2, TrainOutcome};

/// One configuration to train and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub modalities: ModalitySet,
    #[serde(default = "yes")]
    pub tfe: bool,
    #[serde(default = "yes")]
    pub qam: bool,
}

fn yes() -> bool {
    true
}

impl AblationCell {
    pub fn label(&self) -> String {
        let mut s = self.modalities.to_string();
        match (self.tfe, self.qam) {
            (true, true) => s.push_str(" +TFE +QAM"),
            (true, false) => s.push_str(" +TFE"),
            (false, true) => s.push_str(" +QAM"),
            (false, false) => {}
        }
        s
    }
}

/// Degradation applied to the validation split only. Each sample gets one
/// contiguous span covering `span_fraction` of its frames at a random offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCorruption {
    pub modality: Modality,
    pub kind: CorruptionKind,
    pub strength: f64,
    pub span_fraction: f64,
}

impl EvalCorruption {
    /// Corrupts every sample; returns the corrupted copies and each span.
    pub fn apply(&self, samples: &[SampleBundle], seed: u64) -> Result<(Vec<SampleBundle>, Vec<(usize, usize)>), CorpusError> {
        if !(self.span_fraction > 0.0 && self.span_fraction <= 1.0) {
            return Err(CorpusError::InvalidParameter(format!(
                "span fraction {} outside (0,1]",
                self.span_fraction
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(samples.len());
        let mut spans = Vec::with_capacity(samples.len());
        for s in samples {
            let t = s.frames();
            let len = ((t as f64 * self.span_fraction).round() as usize).clamp(1, t);
            let start = rng.gen_range(0..=t - len);
            let spec = CorruptionSpec {
                modality: self.modality,
                kind: self.kind,
                strength: self.strength,
                frame_span: Some((start, start + len)),
            };
            out.push(corrupt(s, &spec, rng.gen())?);
            spans.push((start, start + len));
        }
        Ok((out, spans))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    #[serde(default)]
    pub eval_corruption: Option<EvalCorruption>,
}

impl AblationPlan {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let plan: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() || self.cells.is_empty() {
            return Err(ConfigError::Invalid("ablation plan needs at least one seed and one cell".into()));
        }
        if let Some(c) = self.cells.iter().find(|c| c.modalities.count() == 0) {
            return Err(ConfigError::Invalid(format!("cell `{}` has no modality", c.label())));
        }
        Ok(())
    }

    /// Model seed for one cell and one entry of `seeds`.
    pub fn cell_seed(base: u64, cell: usize) -> u64 {
        let mut z = base ^ (cell as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cell: AblationCell,
    /// Validation ρ_mean per plan seed; `None` where training failed or ρ
    /// was undefined.
    pub rho: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Same models scored on the corrupted validation split, when the plan
    /// asks for one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted: Option<CorruptedScores>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedScores {
    pub rho: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Quality weight of the corrupted modality over the corrupted frames,
    /// for cells with quality weighting that see that modality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightShift>,
}

/// Mean quality weight over the corrupted frames, with the clean input and
/// with the corrupted input, per plan seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightShift {
    pub clean: Vec<Option<f64>>,
    pub corrupted: Vec<Option<f64>>,
    pub clean_mean: Option<f64>,
    pub corrupted_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        let corrupted = self.rows.iter().any(|r| r.corrupted.is_some());
        let mut s = String::new();
        let _ = write!(s, "{:<width$}  {:>8}  {:>8}", "Setting", "mean ρ", "std");
        if corrupted {
            let _ = write!(s, "  {:>10}  {:>8}  {:>8}  {:>8}", "corrupt ρ", "std", "β clean", "β corr");
        }
        let _ = writeln!(s, "  failures");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let _ = write!(s, "{:<width$}  {:>8}  {:>8}", r.label, fmt(r.mean), fmt(r.std));
            if corrupted {
                let c = r.corrupted.as_ref();
                let w = c.and_then(|c| c.weight.as_ref());
                let _ = write!(
                    s,
                    "  {:>10}  {:>8}  {:>8}  {:>8}",
                    fmt(c.and_then(|c| c.mean)),
                    fmt(c.and_then(|c| c.std)),
                    fmt(w.and_then(|w| w.clean_mean)),
                    fmt(w.and_then(|w| w.corrupted_mean))
                );
            }
            let _ = writeln!(s, "  {}", r.failures.len());
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Population mean and standard deviation of the defined values.
fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Trains every cell under every seed and scores the selected EMA weights on
/// `val` (and on a corrupted copy of `val` when the plan has one). Failures
/// are recorded per cell. Jobs run on up to `threads` worker threads; results
/// do not depend on the thread count.
pub fn run_ablation(
    plan: &AblationPlan,
    train: &[SampleBundle],
    val: &[SampleBundle],
    base: &Config,
    encoders: &FrozenEncoders,
    threads: usize,
) -> Result<AblationTable, EvalError> {
    plan.validate().map_err(|e| EvalError::Plan(e.to_string()))?;
    let train_enc = encode_corpus(encoders, train)?;
    let val_enc = encode_corpus(encoders, val)?;
    let corrupted_enc = match &plan.eval_corruption {
        Some(c) => {
            let (samples, spans) = c.apply(val, base.seed ^ 0x0c0e_ffee)?;
            Some(CorruptedSet {
                samples: encode_corpus(encoders, &samples)?,
                spans,
                modality: c.modality,
            })
        }
        None => None,
    };

    let jobs: Vec<(usize, usize)> = (0..plan.cells.len())
        .flat_map(|c| (0..plan.seeds.len()).map(move |s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<CellScore, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let run = |job: usize| {
        let (c, s) = jobs[job];
        let cfg = cell_config(base, &plan.cells[c], AblationPlan::cell_seed(plan.seeds[s], c));
        let r = score_cell(&train_enc, &val_enc, corrupted_enc.as_ref(), &cfg);
        results.lock().expect("no poisoned workers")[job] = Some(r);
    };
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let job = next.fetch_add(1, Ordering::Relaxed);
                if job >= jobs.len() {
                    break;
                }
                run(job);
            });
        }
    });

    let results = results.into_inner().expect("no poisoned workers");
    let rows = plan
        .cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut rho = Vec::new();
            let mut rho_corrupted = Vec::new();
            let mut weights = Vec::new();
            let mut failures = Vec::new();
            for s in 0..plan.seeds.len() {
                match results[c * plan.seeds.len() + s].clone().expect("every job ran") {
                    Ok(r) => {
                        rho.push(r.clean);
                        rho_corrupted.push(r.corrupted);
                        weights.push(r.weight);
                    }
                    Err(e) => {
                        log::warn!("cell `{}` seed {}: {e}", cell.label(), plan.seeds[s]);
                        failures.push(format!("seed {}: {e}", plan.seeds[s]));
                        rho.push(None);
                        rho_corrupted.push(None);
                        weights.push(None);
                    }
                }
            }
            let (mean, std) = mean_std(&rho);
            let corrupted = plan.eval_corruption.as_ref().map(|_| {
                let (mean, std) = mean_std(&rho_corrupted);
                let weight = weights.iter().any(Option::is_some).then(|| {
                    let clean: Vec<Option<f64>> = weights.iter().map(|w| w.map(|w| w.0)).collect();
                    let corrupted: Vec<Option<f64>> = weights.iter().map(|w| w.map(|w| w.1)).collect();
                    WeightShift {
                        clean_mean: mean_std(&clean).0,
                        corrupted_mean: mean_std(&corrupted).0,
                        clean,
                        corrupted,
                    }
                });
                CorruptedScores {
                    rho: rho_corrupted,
                    mean,
                    std,
                    weight,
                }
            });
            AblationRow {
                label: cell.label(),
                cell: cell.clone(),
                rho,
                mean,
                std,
                corrupted,
                failures,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: plan.seeds.clone(),
        rows,
    })
}

pub(crate) fn cell_config(base: &Config, cell: &AblationCell, seed: u64) -> Config {
    Config {
        seed,
        modalities: cell.modalities,
        use_tfe: cell.tfe,
        use_qam: cell.qam,
        ..base.clone()
    }
}

struct CorruptedSet {
    samples: Vec<EncodedSample>,
    spans: Vec<(usize, usize)>,
    modality: Modality,
}

#[derive(Debug, Clone, Copy)]
struct CellScore {
    clean: Option<f64>,
    corrupted: Option<f64>,
    /// Mean quality weight of the corrupted modality over the corrupted
    /// frames: (clean input, corrupted input).
    weight: Option<(f64, f64)>,
}

fn score_cell(
    train: &[EncodedSample],
    val: &[EncodedSample],
    corrupted: Option<&CorruptedSet>,
    cfg: &Config,
) -> Result<CellScore, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let out = train_stage2(train, val, cfg, None).map_err(|e| e.to_string())?;
    let score = |set: &[EncodedSample]| -> Result<Option<f64>, String> {
        let (_, report) = evaluate_encoded(&out.model, &out.best, set).map_err(|e| e.to_string())?;
        Ok(report.rho_mean)
    };
    let weight = match corrupted {
        Some(c) if cfg.use_qam && cfg.modalities.contains(c.modality) && c.modality != Modality::Text => {
            Some(span_weight(&out, val, c).map_err(|e| e.to_string())?)
        }
        _ => None,
    };
    Ok(CellScore {
        clean: score(val)?,
        corrupted: corrupted.map(|c| score(&c.samples)).transpose()?.flatten(),
        weight,
    })
}

fn span_weight(out: &TrainOutcome, val: &[EncodedSample], c: &CorruptedSet) -> Result<(f64, f64), FusionError> {
    let column = |q: Option<QualityWeights>| -> Vec<f64> {
        let q = q.expect("quality weighting is on");
        match c.modality {
            Modality::Visual => q.beta_v,
            _ => q.beta_a,
        }
        .expect("modality is present")
    };
    let (mut clean, mut corrupted, mut n) = (0.0, 0.0, 0usize);
    for ((sample, damaged), &(start, end)) in val.iter().zip(&c.samples).zip(&c.spans) {
        let before = column(out.model.quality(&out.best, sample)?);
        let after = column(out.model.quality(&out.best, damaged)?);
        clean += before[start..end].iter().sum::<f64>();
        corrupted += after[start..end].iter().sum::<f64>();
        n += end - start;
    }
    Ok((clean / n as f64, corrupted / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;

    #[test]
    fn plan_parses_and_rejects_empty_cells() {
        let plan = AblationPlan::from_toml_str(
            r#"
seeds = [1, 2]
[[cells]]
modalities = "V+A+T"
[[cells]]
modalities = "A"
tfe = false
qam = false
[eval_corruption]
modality = "visual"
kind = "occlusion_mask"
strength = 1.0
span_fraction = 0.5
"#,
        )
        .unwrap();
        assert_eq!(plan.cells.len(), 2);
        assert_eq!(plan.cells[0].label(), "V+A+T +TFE +QAM");
        assert_eq!(plan.cells[1].label(), "A");
        assert!(AblationPlan::from_toml_str("seeds = []\n[[cells]]\nmodalities = \"V\"\n").is_err());
    }

    #[test]
    fn cell_seeds_differ_by_cell_and_base() {
        let a = AblationPlan::cell_seed(1, 0);
        assert_ne!(a, AblationPlan::cell_seed(1, 1));
        assert_ne!(a, AblationPlan::cell_seed(2, 0));
        assert_eq!(a, AblationPlan::cell_seed(1, 0));
    }

    #[test]
    fn one_cell_one_seed_gives_one_row_independent_of_threads() {
        let cfg = Config {
            frames: 6,
            dim_visual: 4,
            dim_audio: 4,
            dim_text: 4,
            embed_dim: 4,
            encoder_hidden: 4,
            tcn_channels: 4,
            tcn_layers: 1,
            lstm_hidden: 2,
            d_shared: 4,
            segments: 2,
            transformer_layers: 1,
            heads: 1,
            ffn_hidden: 4,
            quality_hidden: 2,
            epochs: 2,
            batch_size: 4,
            ..Config::default()
        };
        let data = generate_corpus(3, 12, 6, (4, 4, 4)).unwrap();
        let enc = FrozenEncoders::random(&cfg, 0);
        let plan = AblationPlan {
            seeds: vec![5],
            cells: vec![AblationCell {
                modalities: ModalitySet::ALL,
                tfe: true,
                qam: true,
            }],
            eval_corruption: None,
        };
        let t1 = run_ablation(&plan, &data[..8], &data[8..], &cfg, &enc, 1).unwrap();
        assert_eq!(t1.rows.len(), 1);
        assert_eq!(t1.rows[0].rho.len(), 1);
        let two_cells = AblationPlan {
            cells: vec![plan.cells[0].clone(), plan.cells[0].clone()],
            ..plan.clone()
        };
        let t2 = run_ablation(&two_cells, &data[..8], &data[8..], &cfg, &enc, 4).unwrap();
        assert_eq!(t2.rows[0], t1.rows[0]);
        assert!(t1.to_text().contains("V+A+T +TFE +QAM"));
        assert!(t1.to_json().contains("\"rows\""));
    }

    #[test]
    fn training_failure_is_recorded_not_fatal() {
        let cfg = Config {
            heads: 3,
            ..Config::default()
        };
        let data = generate_corpus(3, 6, 50, (32, 48, 16)).unwrap();
        let enc = FrozenEncoders::random(&Config::default(), 0);
        let plan = AblationPlan {
            seeds: vec![1],
            cells: vec![AblationCell {
                modalities: ModalitySet::ALL,
                tfe: true,
                qam: true,
            }],
            eval_corruption: None,
        };
        let t = run_ablation(&plan, &data[..4], &data[4..], &cfg, &enc, 1).unwrap();
        assert_eq!(t.rows[0].failures.len(), 1);
        assert_eq!(t.rows[0].rho, vec![None]);
        assert_eq!(t.rows[0].mean, None);
    }
}
