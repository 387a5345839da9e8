//! The merged configuration of a run.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::continuity::PriorConfig;
use crate::error::{Error, Result};
use crate::evaluate::MatchConfig;
use crate::model::ModelConfig;
use crate::pipeline::FilterConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Package version that wrote the config.
    pub version: String,
    /// Master seed; copied into every component by [`RunConfig::seeded`].
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prior: PriorConfig,
    pub filter: FilterConfig,
    pub matching: MatchConfig,
    pub froc_thresholds: Vec<f32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: VERSION.to_string(),
            seed: 0,
            output_dir: None,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prior: PriorConfig::default(),
            filter: FilterConfig::default(),
            matching: MatchConfig::default(),
            froc_thresholds: crate::evaluate::default_thresholds(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    /// Propagates the master seed into every seeded component.
    pub fn seeded(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.prior.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.prior.validate()?;
        self.filter.validate()?;
        self.matching.validate()?;
        if self.froc_thresholds.len() < 2 {
            return Err(Error::Invalid("froc_thresholds needs at least two values".into()));
        }
        if self.froc_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Invalid("froc_thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 5, "train": {"pretrain_epochs": 3}, "model": {"unet": {"base_width": 8}}}"#).unwrap();
        assert_eq!(c.train.pretrain_epochs, 3);
        assert_eq!(c.train.te_epochs, TrainConfig::default().te_epochs);
        assert_eq!(c.model.unet.base_width, 8);
        assert_eq!(c.model.unet.depth, 4);
        let s = c.seeded();
        assert_eq!((s.train.seed, s.prior.seed, s.synth.seed), (5, 5, 5));
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 1}}"#).is_err());
    }
}
