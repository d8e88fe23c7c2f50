//! Experiment configuration: one JSON document, every field optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use graphrl_core::env::EnvConfig;
use graphrl_core::CostParams;
use graphrl_learn::{PolicyConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config {path}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    /// Seeds for multi-run experiments.
    pub seeds: Vec<u64>,
    /// Exhaustive-search depth.
    pub depth: usize,
    /// Episodes per seed for the random baseline.
    pub random_episodes: usize,
    /// Save a checkpoint every this many training episodes; 0 disables.
    pub checkpoint_every: usize,
    /// Shape scale factors for the generalisation sweep.
    pub scales: Vec<f64>,
    pub cost: CostParams,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            depth: 6,
            random_episodes: 100,
            checkpoint_every: 100,
            scales: vec![0.5, 1.0, 2.0],
            cost: CostParams::default(),
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub depth: Option<usize>,
}

impl LabConfig {
    pub fn from_json(doc: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: LabConfig = serde_json::from_str(doc).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&doc, &path.display().to_string())
    }

    /// File (if any) over defaults, then flags over both.
    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(e) = flags.episodes {
            cfg.train.episodes = e;
        }
        if let Some(d) = flags.depth {
            cfg.depth = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field, reason: &str| {
            Err(ConfigError::Invalid {
                field,
                reason: reason.to_string(),
            })
        };
        if self.depth > 8 {
            return bad("depth", "exhaustive search supports depth at most 8");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("scales", "scale factors must be finite and positive");
        }
        if self.env.horizon == 0 || self.env.feedback_period == 0 {
            return bad("env", "horizon and feedback_period must be positive");
        }
        if self.train.batch_size == 0 || self.train.update_every == 0 {
            return bad("train", "batch_size and update_every must be positive");
        }
        if !(self.train.lr > 0.0 && self.train.clip_eps > 0.0) {
            return bad("train", "lr and clip_eps must be positive");
        }
        if !(self.env.edge_norm > 0.0) {
            return bad("env.edge_norm", "must be positive");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let doc = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(doc.as_bytes());
        hex::encode(&digest[..8])
    }
}
