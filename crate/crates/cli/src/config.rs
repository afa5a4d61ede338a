//! `--config` file: optional `[model]`, `[train]` and `[adapt]` tables.

use std::fs;
use std::path::Path;

use rodiff_core::diffusion::TrainConfig;
use rodiff_core::model::RodModel;
use rodiff_core::pita::AdaptConfig;
use rodiff_core::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<RodModel>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m) = &cfg.model {
            m.validate()?;
        }
        cfg.train.validate()?;
        cfg.adapt.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn model(&self) -> RodModel {
        self.model.clone().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rodiff_core::pita::AdaptMode;

    #[test]
    fn sections_are_optional() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        let cfg = RunConfig::from_toml_str("[adapt]\nmode = \"sample_grad\"\n[train]\nbatch = 4\n").unwrap();
        assert_eq!(cfg.adapt.mode, AdaptMode::SampleGrad);
        assert_eq!(cfg.train.batch, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
        let e = RunConfig::from_toml_str("[adapt]\nlr_tta = -1.0\n").unwrap_err();
        assert!(e.is_validation());
    }
}
