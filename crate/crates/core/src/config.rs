//! The single-document run configuration.
//!
//! One JSON file carries the model, mask-optimization, and training
//! sections plus the dataset descriptor, output directory, and master seed.
//! Unknown keys are rejected. The `RWNET_SEED` environment variable
//! overrides the master seed at load time.

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rde::RdeConfig;
use crate::rng::mix;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEED_ENV_VAR: &str = "RWNET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rde: RdeConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub out_dir: PathBuf,
    /// Master seed folded into every component seed.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            rde: RdeConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            out_dir: PathBuf::from("run"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses a config file, applies the seed override, and validates.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let Ok(value) = std::env::var(SEED_ENV_VAR) {
            cfg.seed = value.parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV_VAR} must be an unsigned integer, got '{value}'"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rde.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Component configurations with the master seed folded in.
    pub fn resolved(&self) -> (ModelConfig, RdeConfig, TrainConfig, DatasetSpec) {
        let mut model = self.model.clone();
        model.seed = mix(&[self.seed, 1, model.seed]);
        let mut train = self.train.clone();
        train.seed = mix(&[self.seed, 2, train.seed]);
        let mut dataset = self.dataset.clone();
        if let DatasetSpec::Synthetic(s) = &mut dataset {
            s.seed = mix(&[self.seed, 3, s.seed]);
        }
        (model, self.rde.clone(), train, dataset)
    }

    /// The desk-scale synthetic setup: eight shape classes in two folds of
    /// four, 3-way 1-shot 10-query episodes (the four-class test fold cannot
    /// host five ways).
    pub fn synthetic_default() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.train.way = 3;
        cfg
    }
}
