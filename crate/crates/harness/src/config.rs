use std::path::{Path, PathBuf};

use dcedit_core::dlc::ControlConfig;
use dcedit_core::mmdit::ModelConfig;
use dcedit_core::numerics::DEFAULT_RIDGE;
use dcedit_core::psl::Aggregation;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const SEED_ENV: &str = "DCEDIT_SEED";

/// Everything a CLI invocation needs. Loaded from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub control: ControlConfig,
    /// Ridge added to the textual self-attention before inversion.
    pub epsilon: f64,
    pub aggregation: Aggregation,
    pub output_dir: PathBuf,
    pub manifest: PathBuf,
    /// Latent grid for synthetic `seed:<n>` images.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            control: ControlConfig::default(),
            epsilon: DEFAULT_RIDGE,
            aggregation: Aggregation::Mean,
            output_dir: PathBuf::from("out"),
            manifest: PathBuf::from("manifest.json"),
            grid_h: 16,
            grid_w: 16,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config file. Relative `manifest` / `output_dir` resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    /// Replaces the model seed with `DCEDIT_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.model.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        self.control.validate(self.model.layers)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(HarnessError::Config(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(HarnessError::Config("grid dims must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.control.steps, 8);
        assert_eq!(cfg.control.lambda, 80.0);
        assert_eq!(cfg.epsilon, 1e-6);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = RunConfig::from_toml("epsilon = 1e-3\n[control]\nsteps = 4\nlatent_steps = 4\n[model]\nlayers = 2\nheads = 2\nmodel_dim = 8\ntext_dim = 8\nvisual_dim = 8\nchannels = 3\nseed = 9\n").unwrap();
        assert_eq!(cfg.control.steps, 4);
        assert_eq!(cfg.control.cfg_scale, 3.0);
        assert_eq!(cfg.model.channels, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("stepz = 3").is_err());
        let mut cfg = RunConfig::default();
        cfg.control.latent_steps = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.epsilon = -1.0;
        assert!(cfg.validate().is_err());
    }
}
