//! Run configuration, read from TOML; every default is a named key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dp::NoiseSource;
use crate::error::{Error, Result};
use crate::model::Guiding;
use crate::sentence::{OrderPolicy, TokenizerMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Defaults to the longest possible sentence.
    pub context: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 4,
            width: 256,
            heads: 4,
            dropout: 0.1,
            context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub non_private: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    /// Fixes `σ` instead of calibrating it.
    pub noise_multiplier: Option<f64>,
    /// Fixes the expected batch instead of doubling from `initial_batch`.
    pub batch: Option<usize>,
    pub initial_batch: usize,
    pub steps: u64,
    pub augmult: usize,
    pub noise_source: NoiseSource,
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection {
            non_private: false,
            epsilon: 5.0,
            delta: 1e-6,
            clip: 1.0,
            noise_multiplier: None,
            batch: None,
            initial_batch: 64,
            steps: 100_000,
            augmult: 1,
            noise_source: NoiseSource::Seeded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 5e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub rows: usize,
    pub temperature: f64,
    /// Defaults to the training order policy.
    pub order: Option<OrderPolicy>,
    pub seed: u64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            rows: 10_000,
            temperature: 1.0,
            order: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Pairs compared when there are more than 25 columns.
    pub max_pairs: usize,
    pub plots: bool,
    /// Synthetic table to compare; generated in memory when absent.
    pub synthetic: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_pairs: 300,
            plots: true,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub split_seed: u64,
    pub tokenizer: TokenizerMode,
    pub order: OrderPolicy,
    pub guiding: Guiding,
    /// 0 uses every core.
    pub workers: usize,
    /// Steps between checkpoints during training; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Continue from the checkpoint in `out` if one exists.
    pub resume: bool,
    /// Stop after this many updates; a later `resume` picks up from there.
    pub stop_at: Option<u64>,
    pub model: ModelSection,
    pub privacy: PrivacySection,
    pub optimizer: OptimizerSection,
    pub generation: GenerationSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out: PathBuf::from("run"),
            seed: 0,
            split_seed: 0,
            tokenizer: TokenizerMode::Level,
            order: OrderPolicy::Fixed,
            guiding: Guiding::Trie,
            workers: 0,
            checkpoint_every: 0,
            resume: false,
            stop_at: None,
            model: ModelSection::default(),
            privacy: PrivacySection::default(),
            optimizer: OptimizerSection::default(),
            generation: GenerationSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset path given (set `data` or pass --data)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.privacy;
        let bad = |m: String| Err(Error::Config(m));
        if !p.non_private {
            if !(p.epsilon > 0.0) {
                return bad(format!("epsilon must be positive, got {}", p.epsilon));
            }
            if !(p.delta > 0.0 && p.delta < 1.0) {
                return bad(format!("delta {} outside (0, 1)", p.delta));
            }
        }
        if !(p.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", p.clip));
        }
        if p.augmult == 0 || p.initial_batch == 0 || p.batch == Some(0) {
            return bad("augmult and batch sizes must be at least 1".into());
        }
        if !(self.generation.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.generation.temperature));
        }
        if self.model.width == 0 || self.model.heads == 0 || !self.model.width.is_multiple_of(self.model.heads) {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.model.width, self.model.heads
            ));
        }
        Ok(())
    }
}
