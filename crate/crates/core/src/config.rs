//! Run configuration shared by the command-line tools.
//!
//! Ablation switches live where they act: `model.use_noise_net`,
//! `model.use_mtn`, `train.augmentation`, `train.loss_matching`. The noise
//! net core is `model.noise_net.core`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evalkit::DEFAULT_HORIZONS;
use crate::models::ModelConfig;
use crate::simkit::DatasetConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    /// Window stride; `None` means non-overlapping windows.
    pub stride_s: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: DEFAULT_HORIZONS.to_vec(),
            stride_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus recipe used by `simulate`.
    pub dataset: Option<DatasetConfig>,
    /// Default dataset directory for `train` and `eval`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.dataset {
            d.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return Err(Error::invalid("eval.horizons must list positive horizons"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"dataset": null}"#).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval.horizons, vec![30, 60]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"dataset": null, "train": {"batch_sise": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        assert!(err.is_validation());
        let err = RunConfig::from_json(r#"{"dataset": null, "modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"), "{err}");
    }

    #[test]
    fn ablation_flags_parse() {
        let cfg = RunConfig::from_json(
            r#"{"dataset": null, "model": {"use_mtn": false, "noise_net": {"core": "lstm"}},
                "train": {"augmentation": false, "loss_matching": false}}"#,
        )
        .unwrap();
        assert!(!cfg.model.use_mtn && cfg.model.use_noise_net);
        assert!(!cfg.train.augmentation && !cfg.train.loss_matching);
    }

    #[test]
    fn bad_lambda_rejected() {
        assert!(RunConfig::from_json(r#"{"dataset": null, "train": {"lambda": 1.5}}"#).is_err());
    }
}
