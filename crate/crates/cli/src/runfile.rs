//! The run file passed with `--config`.
//!
//! Three shapes are accepted:
//! * a bare architecture file (top-level `stages`),
//! * a run file with `preset = "<name>"` and an optional `[train]` table,
//! * a run file with an inline `[architecture]` table and optional `[train]`.
//!
//! When `[train]` leaves `image_size` unset it follows the architecture's
//! `input_size`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use simam_core::network::ArchitectureConfig;
use simam_core::train::TrainRunConfig;

use crate::CliError;

pub const DEFAULT_PRESET: &str = "desk";
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub architecture: ArchitectureConfig,
    pub train: TrainRunConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunFile {
    preset: Option<String>,
    architecture: Option<ArchitectureConfig>,
    train: Option<TrainRunConfig>,
}

impl RunFile {
    pub fn from_preset(name: &str) -> Result<Self, CliError> {
        let architecture = ArchitectureConfig::preset(name).map_err(CliError::from)?;
        Ok(Self::with_default_training(architecture))
    }

    fn with_default_training(architecture: ArchitectureConfig) -> Self {
        let train = TrainRunConfig {
            image_size: architecture.input_size,
            ..TrainRunConfig::default()
        };
        RunFile { architecture, train }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: toml::Table = text.parse().map_err(|e| CliError::usage(format!("config parse error: {e}")))?;
        if value.contains_key("stages") {
            let arch = ArchitectureConfig::from_toml(text).map_err(CliError::from)?;
            return Ok(Self::with_default_training(arch));
        }
        let raw: RawRunFile = toml::from_str(text).map_err(|e| CliError::usage(format!("config parse error: {e}")))?;
        let architecture = match (raw.preset, raw.architecture) {
            (Some(_), Some(_)) => {
                return Err(CliError::usage("config sets both `preset` and `[architecture]`"));
            }
            (Some(name), None) => ArchitectureConfig::preset(&name).map_err(CliError::from)?,
            (None, Some(arch)) => {
                arch.validate().map_err(CliError::from)?;
                arch
            }
            (None, None) => ArchitectureConfig::preset(DEFAULT_PRESET).map_err(CliError::from)?,
        };
        let mut run = Self::with_default_training(architecture);
        if let Some(train) = raw.train {
            let sets_size = value
                .get("train")
                .and_then(|t| t.as_table())
                .is_some_and(|t| t.contains_key("image_size"));
            run.train = TrainRunConfig {
                image_size: if sets_size { train.image_size } else { run.train.image_size },
                ..train
            };
            run.train.validate().map_err(|e| CliError::usage(format!("[train] {e}")))?;
        }
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    /// The run file named by `--config`, or the given preset.
    pub fn resolve(config: Option<&Path>, preset: &str) -> Result<Self, CliError> {
        match config {
            Some(p) => Self::load(p),
            None => Self::from_preset(preset),
        }
    }

    /// Folds the global `--seed` and `--lambda` flags into the run.
    pub fn apply_overrides(&mut self, seed: Option<u64>, lambda: Option<f64>) -> Result<(), CliError> {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(l) = lambda.or(self.train.lambda) {
            self.architecture = self.architecture.with_lambda(l).map_err(CliError::from)?;
            self.train.lambda = Some(l);
        }
        self.train.validate().map_err(CliError::from)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::usage(e.to_string()))
    }
}
