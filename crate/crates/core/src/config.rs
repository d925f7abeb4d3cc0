//! Run configuration: `key = value` files plus overrides, and the
//! fingerprint stamped on every report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::ResampleStrategy;
use crate::error::{bail, Error, Result};
use crate::model::{LoraConfig, ModelConfig};
use crate::pipeline::{TrackerConfig, DEFAULT_CONTEXT_FACTOR, DEFAULT_SEARCH_FACTOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pe_strategy: ResampleStrategy,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Worker threads for evaluation; excluded from the fingerprint.
    pub workers: usize,
    pub context_factor: f64,
    pub search_factor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lora = LoraConfig::default();
        Self {
            preset: "tiny96".into(),
            seed: 0,
            weights: None,
            annotations: None,
            out: None,
            pe_strategy: ResampleStrategy::default(),
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            workers: 1,
            context_factor: DEFAULT_CONTEXT_FACTOR,
            search_factor: DEFAULT_SEARCH_FACTOR,
        }
    }
}

pub const KEYS: [&str; 11] = [
    "preset",
    "seed",
    "weights",
    "annotations",
    "out",
    "pe_strategy",
    "lora_rank",
    "lora_alpha",
    "workers",
    "context_factor",
    "search_factor",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if !(v.is_finite() && v > 0.0) {
        bail!(Config, "{key} must be positive, got {v}");
    }
    Ok(v)
}

impl RunConfig {
    /// Sets one key; dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key.as_str() {
            "preset" => {
                ModelConfig::preset(value)?;
                self.preset = value.to_ascii_lowercase().replace('-', "");
            }
            "seed" => self.seed = parse(&key, value)?,
            "weights" => self.weights = path(value),
            "annotations" => self.annotations = path(value),
            "out" => self.out = path(value),
            "pe_strategy" => self.pe_strategy = parse(&key, value)?,
            "lora_rank" => {
                self.lora_rank = parse(&key, value)?;
                if self.lora_rank == 0 {
                    bail!(Config, "lora_rank must be at least 1");
                }
            }
            "lora_alpha" => self.lora_alpha = positive(&key, parse(&key, value)?)?,
            "workers" => {
                self.workers = parse(&key, value)?;
                if self.workers == 0 {
                    bail!(Config, "workers must be at least 1");
                }
            }
            "context_factor" => self.context_factor = positive(&key, parse(&key, value)?)?,
            "search_factor" => self.search_factor = positive(&key, parse(&key, value)?)?,
            _ => bail!(Config, "unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value, got {raw:?}", n + 1);
            };
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    fn value(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "preset" => self.preset.clone(),
            "seed" => self.seed.to_string(),
            "weights" => path(&self.weights),
            "annotations" => path(&self.annotations),
            "out" => path(&self.out),
            "pe_strategy" => self.pe_strategy.to_string(),
            "lora_rank" => self.lora_rank.to_string(),
            "lora_alpha" => format!("{:?}", self.lora_alpha),
            "workers" => self.workers.to_string(),
            "context_factor" => format!("{:?}", self.context_factor),
            "search_factor" => format!("{:?}", self.search_factor),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key, one `key = value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.value(k));
        }
        s
    }

    /// The settings that can change a number: everything except `workers`
    /// and `out`.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .filter(|k| !matches!(**k, "workers" | "out"))
            .map(|k| format!("{k}={}", self.value(k)))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// FNV-1a of [`canonical`](Self::canonical), hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.preset)
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
        }
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            context_factor: self.context_factor,
            search_factor: self.search_factor,
            ..TrackerConfig::default()
        }
    }
}
