use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::{LossCoefficients, Toggles};
use crate::model::{partition_channels, PartitionSpec};

/// Version written to and required in the `schema` field.
pub const CONFIG_SCHEMA: u32 = 1;

/// Training configuration. Every field except `schema` has a default, and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub seed: u64,
    pub coefficients: LossCoefficients,
    /// Feature channels `d` per level.
    pub channels: usize,
    /// Common : specific : confounding channel ratio.
    pub partition_ratio: [f64; 3],
    /// Extractor output channels `d_raw`.
    pub raw_channels: usize,
    pub hidden: usize,
    pub spatial_len: usize,
    pub enable_fs: bool,
    pub enable_cs: bool,
    pub dual_backbone: bool,
    pub learnable_lambda: bool,
    pub subcentroid_bank: bool,
    /// Momentum `μ` of the sub-centroid bank.
    pub centroid_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            coefficients: LossCoefficients::default(),
            channels: 20,
            partition_ratio: [5.0, 3.0, 2.0],
            raw_channels: 20,
            hidden: 64,
            spatial_len: 4,
            enable_fs: true,
            enable_cs: true,
            dual_backbone: true,
            learnable_lambda: false,
            subcentroid_bank: false,
            centroid_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return invalid(format!("config schema {} is not supported (expected {CONFIG_SCHEMA})", self.schema));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return invalid(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.centroid_momentum) {
            return invalid(format!("centroid_momentum must lie in [0, 1], got {}", self.centroid_momentum));
        }
        if self.raw_channels == 0 || self.hidden == 0 || self.spatial_len == 0 {
            return invalid("raw_channels, hidden and spatial_len must be positive");
        }
        self.coefficients.validate()?;
        self.partition()?;
        Ok(())
    }

    pub fn partition(&self) -> Result<PartitionSpec> {
        partition_channels(self.channels, self.partition_ratio)
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            enable_fs: self.enable_fs,
            enable_cs: self.enable_cs,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("schema").is_none() {
            return invalid("config is missing the schema field");
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.partition().unwrap().sizes(), (10, 6, 4));
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = TrainConfig::from_json(r#"{"schema": 1, "epochs": 3, "coefficients": {"lambda_cs": 0.5}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.coefficients.lambda_cs, 0.5);
        assert_eq!(cfg.coefficients.eps_fuse, 0.7);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"epochs": 3}"#,
            r#"{"schema": 2}"#,
            r#"{"schema": 1, "epoch": 3}"#,
            r#"{"schema": 1, "batch_size": 0}"#,
            r#"{"schema": 1, "learning_rate": -0.1}"#,
            r#"{"schema": 1, "channels": 2}"#,
            r#"{"schema": 1, "coefficients": {"eps_fuse": 2.0}}"#,
            r#"{"schema": 1, "coefficients": {"lambda_x": 2.0}}"#,
        ] {
            assert!(matches!(TrainConfig::from_json(text), Err(Error::Validation(_))), "{text}");
        }
    }
}
