//! Run configuration: one JSON file bundling every block a training or
//! evaluation run needs, plus the manifest written next to run outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cropper::CropConfig;
use crate::dataio::NormalizeConfig;
use crate::encoder::{EncoderConfig, Stage};
use crate::error::{Error, Result};
use crate::masker::MaskConfig;
use crate::objectives::ObjectiveConfig;
use crate::trainer::TrainConfig;

/// Complete configuration for a run. Every block falls back to its default
/// when omitted from the file, so `{}` is a valid config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub crop: CropConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub objectives: ObjectiveConfig,
    #[serde(default)]
    pub normalize: NormalizeConfig,
}

impl RunConfig {
    /// Parse a config file. Read and parse failures are validation errors:
    /// the path is user input.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::validation("config", format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation("config", format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.crop.validate()?;
        self.mask.validate()?;
        self.objectives.validate()?;
        self.normalize.validate()?;
        Ok(())
    }

    /// Canonical JSON for this config: fixed field order, every default
    /// spelled out. Two configs hash equal iff they run identically.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 hex digest of the canonical JSON.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical_json()?.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }

    /// Write the canonical form next to run outputs so the hash can be
    /// recomputed from the artifacts alone.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.canonical_json()?)?;
        Ok(())
    }
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub stage: Stage,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, outputs: Vec<String>, wall_clock_secs: f64) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.train.seed,
            stage: cfg.train.stage,
            outputs,
            wall_clock_secs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::validation("manifest", format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)
            .map_err(|e| Error::validation("manifest", format!("{}: {e}", path.display())))?)
    }
}
