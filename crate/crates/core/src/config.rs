//! Run configuration files (TOML).
//!
//! ```toml
//! [train]
//! epochs = 100
//! batch_size = 16
//! lr = 5e-4
//! weight_decay = 1e-4
//! seed = 0
//! eval_every = 1
//!
//! [train.weights]
//! alpha = [1.0, 1.0, 1.0, 1.0]
//! lambda = [1.0, 1.0, 1.0]
//! tau = 0.5
//! similarity_input = "logits"
//! elbo_expectation = "expert_z"
//!
//! [model]
//! hidden_dims = [64, 64]
//! latent_dim = 32
//!
//! [split]
//! test_fraction = 0.1666
//! val_fraction = 0.2
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ModelConfig;
use crate::synthdata::{self, Dataset, Holdout};
use crate::train::TrainConfig;

/// Architecture choices that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { hidden_dims: m.hidden_dims, latent_dim: m.latent_dim }
    }
}

impl ArchConfig {
    pub const FULL_SCALE_LATENT_DIM: usize = 512;

    /// Full model configuration with input widths taken from `dataset`.
    pub fn for_data(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let (Some(feature_dim), Some(report_dim)) = (dataset.feature_dim(), dataset.report_dim()) else {
            return Err(Error::Contract("cannot size a model from an empty dataset".into()));
        };
        let cfg = ModelConfig { feature_dim, report_dim, hidden_dims: self.hidden_dims.clone(), latent_dim: self.latent_dim };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stratified holdout fractions: `test_fraction` of all samples, then
/// `val_fraction` of the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        // 5:1 train+val to test
        Self { test_fraction: 1.0 / 6.0, val_fraction: 0.2 }
    }
}

impl SplitSettings {
    pub fn split(&self, dataset: &Dataset, seed: u64) -> Result<Holdout> {
        synthdata::holdout_split(dataset, self.test_fraction, self.val_fraction, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ArchConfig,
    pub split: SplitSettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let loc = match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("line {line}")
                }
                None => "document".to_string(),
            };
            Error::parse(path, loc, e.message().to_string())
        })?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Full-scale training length and latent width.
    pub fn full_scale(mut self) -> Self {
        self.train.epochs = TrainConfig::FULL_SCALE_EPOCHS;
        self.model.latent_dim = ArchConfig::FULL_SCALE_LATENT_DIM;
        self
    }
}
