//! The merged JSON configuration and flag overrides.
//!
//! Precedence, highest first: command-line flags, the `--config` file,
//! `MODALSEG_SEED` (seeds only), built-in defaults.

use std::fs;
use std::path::Path;

use modalseg_core::dataio::SyntheticSpec;
use modalseg_core::model::ModelConfig;
use modalseg_core::relevance::OddsConfig;
use modalseg_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "MODALSEG_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    /// Includes the loss weights under `train.loss`.
    pub train: TrainConfig,
    pub odds: OddsConfig,
}

/// Which seed fields the config file set explicitly.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExplicitSeeds {
    pub data: bool,
    pub train: bool,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<(Self, ExplicitSeeds), CliError> {
        let Some(path) = path else {
            return Ok((Self::default(), ExplicitSeeds::default()));
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            CliError::usage(format!("config {} is not valid JSON: {e}", path.display()))
        })?;
        let has = |section: &str| value.get(section).and_then(|s| s.get("seed")).is_some();
        let explicit = ExplicitSeeds {
            data: has("data"),
            train: has("train"),
        };
        let cfg = serde_json::from_value(value)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        Ok((cfg, explicit))
    }

    /// Fill seeds the file left unset from `MODALSEG_SEED`.
    pub fn apply_seed_env(&mut self, explicit: ExplicitSeeds) -> Result<(), CliError> {
        let Ok(raw) = std::env::var(SEED_ENV) else {
            return Ok(());
        };
        let seed: u64 = raw.trim().parse().map_err(|_| {
            CliError::usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
        })?;
        if !explicit.data {
            self.data.seed = seed;
        }
        if !explicit.train {
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: modalseg_core::Error| CliError::usage(e.to_string());
        self.data.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.odds.validate().map_err(usage)?;
        Ok(())
    }
}
