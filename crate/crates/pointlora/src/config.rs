//! TOML run configuration. Every field defaults to the full-size setting.

use std::path::{Path, PathBuf};

use pointlora_core::data::SyntheticSpec;
use pointlora_core::model::ModelConfig;
use pointlora_core::train::{LossConfig, OptimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds PointLoRA/head initialization, shuffling and drop path.
    pub seed: u64,
    /// Seeds the fabricated backbone under `--backbone random`.
    pub backbone_seed: u64,
    pub eval_batch: Option<usize>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub synthetic: SyntheticSpec,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Metrics log; defaults to the checkpoint path with `.log` appended.
    pub log: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.eval_batch == Some(0) {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn eval_batch(&self) -> usize {
        self.eval_batch.unwrap_or(self.optim.batch_size)
    }
}
