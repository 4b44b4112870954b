//! Flat `key = value` run configuration (a TOML subset).
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | base seed for init, shuffling and splits |
//! | `frames` | 50 | frames per generated sample (10 s at 5 fps) |
//! | `dim_visual`, `dim_audio`, `dim_text` | 32, 48, 16 | input feature widths |
//! | `embed_dim` | 32 | Stage-I embedding width |
//! | `encoder_hidden` | 64 | hidden width of the toy encoders |
//! | `vocab_size` | 512 | hashed token buckets of the text encoder |
//! | `temperature` | 0.07 | InfoNCE temperature |
//! | `symmetric_loss` | false | also add the text→modality direction |
//! | `align_epochs` | 30 | Stage-I epochs |
//! | `align_batch_size` | 16 | Stage-I batch size |
//! | `align_eta_max`, `align_eta_min` | 0.3, 0.03 | Stage-I learning-rate band |
//! | `tcn_layers`, `tcn_kernel`, `tcn_channels` | 4, 3, 32 | visual TCN |
//! | `lstm_hidden` | 32 | BiLSTM hidden size per direction |
//! | `d_shared` | 32 | shared mapping width |
//! | `segments` | 5 | segment count for visual pooling |
//! | `fusion_mode` | `"sum"` | `sum` or `concat` |
//! | `transformer_layers`, `heads`, `ffn_hidden` | 2, 4, 64 | regression encoder |
//! | `quality_hidden` | 16 | hidden width of each quality scorer |
//! | `use_tfe`, `use_qam` | true, true | module toggles |
//! | `modalities` | `"V+A+T"` | active streams |
//! | `eta_max`, `eta_min` | 0.3, 0.003 | Stage-II learning-rate band |
//! | `cycle_epochs` | 10 | SGDR cycle length |
//! | `momentum` | 0.9 | SGD momentum |
//! | `ema_gamma` | 0.99 | EMA decay |
//! | `batch_size` | 8 | Stage-II batch size |
//! | `epochs` | 200 | Stage-II epochs |
//! | `clip_norm` | 5.0 | global gradient-norm clip (0 disables) |
//! | `val_fraction` | 0.25 | held-out share when a single corpus is split |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::Modality;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Weighted sum of the mapped streams.
    Sum,
    /// Concatenation of the weighted streams.
    Concat,
}

impl FromStr for FusionMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(FusionMode::Sum),
            "concat" => Ok(FusionMode::Concat),
            other => Err(ConfigError::Invalid(format!(
                "fusion mode must be `sum` or `concat`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Sum => "sum",
            FusionMode::Concat => "concat",
        })
    }
}

/// Non-empty subset of the three modalities, written like `V+A+T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalitySet {
    pub visual: bool,
    pub audio: bool,
    pub text: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet {
        visual: true,
        audio: true,
        text: true,
    };

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Visual => self.visual,
            Modality::Audio => self.audio,
            Modality::Text => self.text,
        }
    }

    pub fn present(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.contains(*m)).collect()
    }

    pub fn count(&self) -> usize {
        self.present().len()
    }
}

impl FromStr for ModalitySet {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = ModalitySet {
            visual: false,
            audio: false,
            text: false,
        };
        for part in s.split('+').map(str::trim) {
            let slot = match part {
                "V" | "v" => &mut set.visual,
                "A" | "a" => &mut set.audio,
                "T" | "t" => &mut set.text,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown modality `{other}` in `{s}` (use V, A, T joined by +)"
                    )))
                }
            };
            if *slot {
                return Err(ConfigError::Invalid(format!("modality repeated in `{s}`")));
            }
            *slot = true;
        }
        Ok(set)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.visual, "V"), (self.audio, "A"), (self.text, "T")]
            .into_iter()
            .filter_map(|(on, s)| on.then_some(s))
            .collect();
        f.write_str(&parts.join("+"))
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(FusionMode);
string_serde!(ModalitySet);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub frames: usize,
    pub dim_visual: usize,
    pub dim_audio: usize,
    pub dim_text: usize,

    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub vocab_size: usize,
    pub temperature: f64,
    pub symmetric_loss: bool,
    pub align_epochs: usize,
    pub align_batch_size: usize,
    pub align_eta_max: f64,
    pub align_eta_min: f64,

    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub tcn_channels: usize,
    pub lstm_hidden: usize,
    pub d_shared: usize,
    pub segments: usize,
    pub fusion_mode: FusionMode,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub quality_hidden: usize,
    pub use_tfe: bool,
    pub use_qam: bool,
    pub modalities: ModalitySet,

    pub eta_max: f64,
    pub eta_min: f64,
    pub cycle_epochs: usize,
    pub momentum: f64,
    pub ema_gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub val_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 50,
            dim_visual: 32,
            dim_audio: 48,
            dim_text: 16,

            embed_dim: 32,
            encoder_hidden: 64,
            vocab_size: 512,
            temperature: 0.07,
            symmetric_loss: false,
            align_epochs: 30,
            align_batch_size: 16,
            align_eta_max: 0.3,
            align_eta_min: 0.03,

            tcn_layers: 4,
            tcn_kernel: 3,
            tcn_channels: 32,
            lstm_hidden: 32,
            d_shared: 32,
            segments: 5,
            fusion_mode: FusionMode::Sum,
            transformer_layers: 2,
            heads: 4,
            ffn_hidden: 64,
            quality_hidden: 16,
            use_tfe: true,
            use_qam: true,
            modalities: ModalitySet::ALL,

            eta_max: 0.3,
            eta_min: 3e-3,
            cycle_epochs: 10,
            momentum: 0.9,
            ema_gamma: 0.99,
            batch_size: 8,
            epochs: 200,
            clip_norm: 5.0,
            val_fraction: 0.25,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.dim_visual, self.dim_audio, self.dim_text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let positive = [
            ("frames", self.frames),
            ("dim_visual", self.dim_visual),
            ("dim_audio", self.dim_audio),
            ("dim_text", self.dim_text),
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("vocab_size", self.vocab_size),
            ("align_batch_size", self.align_batch_size),
            ("tcn_kernel", self.tcn_kernel),
            ("tcn_channels", self.tcn_channels),
            ("lstm_hidden", self.lstm_hidden),
            ("d_shared", self.d_shared),
            ("segments", self.segments),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("quality_hidden", self.quality_hidden),
            ("cycle_epochs", self.cycle_epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        for (name, hi, lo) in [
            ("eta", self.eta_max, self.eta_min),
            ("align_eta", self.align_eta_max, self.align_eta_min),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return bad(&format!("{name}_min must be positive and not above {name}_max"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0,1)");
        }
        if !(0.0..1.0).contains(&self.ema_gamma) {
            return bad("ema_gamma must be in [0,1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0,1)");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if self.modalities.count() == 0 {
            return bad("at least one modality must be active");
        }
        let d_model = match self.fusion_mode {
            FusionMode::Sum => self.d_shared,
            FusionMode::Concat => self.d_shared * self.modalities.count(),
        };
        if d_model % self.heads != 0 {
            return bad(&format!("model width {d_model} not divisible by {} heads", self.heads));
        }
        Ok(())
    }
}
