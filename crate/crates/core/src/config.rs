//! Experiment configuration: one TOML document with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::VdsiConfig;
use crate::depth::DepthEstimatorConfig;
use crate::error::{Error, Result};
use crate::perceptual::PretrainConfig;
use crate::pipeline::PipelineConfig;
use crate::synth::BenchmarkConfig;

/// Environment variable that overrides every seed-bearing section.
pub const SEED_ENV: &str = "DEPTHDECODE_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    pub pretrain: PretrainConfig,
    pub depth_estimator: DepthEstimatorConfig,
    pub pipeline: PipelineConfig,
    pub vdsi: VdsiConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads `path` when given, otherwise the defaults, then applies the
    /// seed override from the environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = env_seed()? {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    /// Sets the seed of every section to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.benchmark.seed = seed;
        self.pretrain.seed = seed;
        self.depth_estimator.seed = seed;
        self.pipeline.train.seed = seed;
        self.pipeline.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.train.validate()?;
        if self.benchmark.scene.resolution == 0 {
            return Err(Error::Config("scene resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Reads the seed override, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
