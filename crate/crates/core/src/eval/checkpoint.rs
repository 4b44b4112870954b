//! Binary checkpoint format.
//!
//! ```text
//! "EMCK" | version u32 | crc32 u32 | body
//! body   = stage u8 | seed u64 | config (len u32, TOML bytes) | group count u32 | group*
//! group  = name (len u32, bytes) | tensor count u32 | tensor*
//! tensor = name (len u32, bytes) | rank u32 | dims u32* | values f64*
//! ```
//!
//! Integers and floats are little-endian. The checksum covers the body, so a
//! truncated file fails the checksum rather than parsing partially.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{EvalError, Predictor};
use crate::align::FrozenEncoders;
use crate::config::{Config, ConfigError};
use crate::fusion::{FusionConfig, FusionError, FusionModel};
use crate::params::{ParamError, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EMCK";
const HEADER_LEN: usize = 12;

const GROUP_PARAMS: &str = "params";
const GROUP_EMA: &str = "ema";
const GROUP_ENCODERS: &str = "encoders";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("expected a {expected} checkpoint, found {found}")]
    StageMismatch { expected: StageTag, found: StageTag },
    #[error("checkpoint has no {0} section")]
    MissingSection(&'static str),
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fusion(FusionError),
}

impl From<ParamError> for CheckpointError {
    fn from(e: ParamError) -> Self {
        match e {
            ParamError::Missing(name) => CheckpointError::MissingTensor(name),
            ParamError::Shape {
                name,
                expected,
                actual,
            } => CheckpointError::ShapeMismatch {
                name,
                expected,
                actual,
            },
        }
    }
}

impl From<FusionError> for CheckpointError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Param(p) => p.into(),
            other => CheckpointError::Fusion(other),
        }
    }
}

impl From<EvalError> for CheckpointError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Fusion(f) => f.into(),
            other => CheckpointError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    /// Stage-I encoders only.
    Align,
    /// Fusion model with its EMA shadow and the frozen encoders.
    Fusion,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Align => "align",
            StageTag::Fusion => "fusion",
        })
    }
}

impl StageTag {
    fn code(self) -> u8 {
        match self {
            StageTag::Align => 0,
            StageTag::Fusion => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(StageTag::Align),
            1 => Some(StageTag::Fusion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub seed: u64,
    /// TOML snapshot of the run configuration.
    pub config: String,
    /// Encoder weights for `Align`, live fusion weights for `Fusion`.
    pub params: ParamStore,
    pub ema: Option<ParamStore>,
    pub encoders: Option<ParamStore>,
}

impl Checkpoint {
    pub fn align(cfg: &Config, encoders: &FrozenEncoders) -> Self {
        Self {
            stage: StageTag::Align,
            seed: cfg.seed,
            config: cfg.to_toml_string(),
            params: encoders.params().clone(),
            ema: None,
            encoders: None,
        }
    }

    pub fn fusion(cfg: &Config, params: ParamStore, ema: ParamStore, encoders: &FrozenEncoders) -> Self {
        Self {
            stage: StageTag::Fusion,
            seed: cfg.seed,
            config: cfg.to_toml_string(),
            params,
            ema: Some(ema),
            encoders: Some(encoders.params().clone()),
        }
    }

    pub fn config(&self) -> Result<Config, CheckpointError> {
        Ok(Config::from_toml_str(&self.config)?)
    }

    /// The frozen encoders, from either stage.
    pub fn frozen_encoders(&self) -> Result<FrozenEncoders, CheckpointError> {
        let cfg = self.config()?;
        let store = match self.stage {
            StageTag::Align => &self.params,
            StageTag::Fusion => self.encoders.as_ref().ok_or(CheckpointError::MissingSection(GROUP_ENCODERS))?,
        };
        Ok(FrozenEncoders::from_params(&cfg, store.clone())?)
    }

    /// Inference bundle using the EMA weights when present.
    pub fn predictor(&self) -> Result<Predictor, CheckpointError> {
        self.expect_stage(StageTag::Fusion)?;
        let cfg = self.config()?;
        let model = FusionModel::new(FusionConfig::from_config(&cfg))?;
        let weights = self.ema.clone().unwrap_or_else(|| self.params.clone());
        Ok(Predictor::new(self.frozen_encoders()?, model, weights)?)
    }

    pub fn expect_stage(&self, expected: StageTag) -> Result<(), CheckpointError> {
        if self.stage != expected {
            return Err(CheckpointError::StageMismatch {
                expected,
                found: self.stage,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.push(self.stage.code());
        body.extend_from_slice(&self.seed.to_le_bytes());
        put_bytes(&mut body, self.config.as_bytes());
        let mut groups = vec![(GROUP_PARAMS, &self.params)];
        if let Some(e) = &self.ema {
            groups.push((GROUP_EMA, e));
        }
        if let Some(e) = &self.encoders {
            groups.push((GROUP_ENCODERS, e));
        }
        put_u32(&mut body, groups.len());
        for (name, store) in groups {
            put_bytes(&mut body, name.as_bytes());
            put_u32(&mut body, store.len());
            for (tname, t) in store.iter() {
                put_bytes(&mut body, tname.as_bytes());
                put_u32(&mut body, t.rank());
                for &d in t.shape() {
                    put_u32(&mut body, d);
                }
                for &v in t.data() {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let prefix = bytes.len().min(MAGIC.len());
        if bytes[..prefix] != MAGIC[..prefix] {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let crc = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let body = &bytes[HEADER_LEN..];
        if crc32fast::hash(body) != crc {
            return Err(CheckpointError::ChecksumMismatch);
        }

        let mut r = Reader { buf: body, pos: 0 };
        let stage = StageTag::from_code(r.u8()?).ok_or_else(|| CheckpointError::Malformed("unknown stage tag".into()))?;
        let seed = r.u64()?;
        let config = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let mut params = None;
        let mut ema = None;
        let mut encoders = None;
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut store = ParamStore::new();
            for _ in 0..r.u32()? {
                let tname = r.string()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let numel: usize = shape.iter().product();
                let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                store.insert(tname, t);
            }
            let slot = match name.as_str() {
                GROUP_PARAMS => &mut params,
                GROUP_EMA => &mut ema,
                GROUP_ENCODERS => &mut encoders,
                other => return Err(CheckpointError::Malformed(format!("unknown section `{other}`"))),
            };
            *slot = Some(store);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            stage,
            seed,
            config,
            params: params.ok_or(CheckpointError::MissingSection(GROUP_PARAMS))?,
            ema,
            encoders,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}
