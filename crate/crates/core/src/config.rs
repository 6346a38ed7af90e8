//! Run configuration: one TOML schema shared by every subcommand.
//!
//! A run is fully described by its config file plus the scenario seed; the
//! CLI echoes the file byte-verbatim into each run directory so results can
//! always be traced back to the exact settings that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ScenarioConfig;
use crate::encoder::EncoderConfig;
use crate::eval::TrajectorySpec;
use crate::fusion::FusionConfig;
use crate::training::{QuantCalibration, StageConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Network shape: encoder trunk and cloud fusion unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSection {
    /// Channels of the encoder trunk.
    pub width: usize,
    /// Residual blocks in encoder and decoder.
    pub blocks: usize,
    /// Latent channels per subcarrier (d_z).
    pub latent_dim: usize,
    /// Token channels per subcarrier in the CU; defaults to `latent_dim`.
    #[serde(default)]
    pub token_dim: Option<usize>,
    /// LSTM state width of the frequency recurrence.
    pub lstm_hidden: usize,
    /// Hidden width of the shared position head.
    pub head_hidden: usize,
    /// Sharpness of the gain-indicator softmax mask.
    pub beta: f64,
}

/// Spatial-covariance calibration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSection {
    /// Clean channel realizations pooled per (BS, subcarrier).
    pub realizations: u64,
    /// Diagonal loading relative to the mean eigenvalue.
    pub loading: f64,
}

/// Test-set settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Samples drawn from the evaluation stream.
    pub samples: usize,
}

/// One run, end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub network: NetworkSection,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub quant: QuantCalibration,
    pub covariance: CovarianceSection,
    pub eval: EvalSection,
    pub trajectory: TrajectorySpec,
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; returns the parsed value and the raw bytes for
    /// verbatim echoing into run directories.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = fs::read_to_string(path)?;
        let config = Self::parse(&text)?;
        Ok((config, text))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.stage1.validate().map_err(|e| ConfigError::Invalid(format!("stage1: {e}")))?;
        self.stage2.validate().map_err(|e| ConfigError::Invalid(format!("stage2: {e}")))?;
        let n = &self.network;
        if n.width == 0 || n.blocks == 0 || n.latent_dim == 0 || n.lstm_hidden == 0 || n.head_hidden == 0
        {
            return Err(ConfigError::Invalid("network dimensions must be positive".into()));
        }
        if n.token_dim == Some(0) {
            return Err(ConfigError::Invalid("token_dim must be positive".into()));
        }
        if !n.beta.is_finite() || n.beta < 0.0 {
            return Err(ConfigError::Invalid(format!("beta {} must be ≥ 0", n.beta)));
        }
        if !(1..=16).contains(&self.quant.bits) {
            return Err(ConfigError::Invalid(format!("quant bits {} outside 1..=16", self.quant.bits)));
        }
        if !(self.quant.percentile > 0.0 && self.quant.percentile <= 100.0) {
            return Err(ConfigError::Invalid(format!(
                "quant percentile {} outside (0, 100]",
                self.quant.percentile
            )));
        }
        if self.quant.samples == 0 {
            return Err(ConfigError::Invalid("quant calibration set is empty".into()));
        }
        if self.covariance.realizations == 0 {
            return Err(ConfigError::Invalid("covariance calibration needs realizations".into()));
        }
        if !(self.covariance.loading > 0.0) || !self.covariance.loading.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "covariance loading {} must be positive",
                self.covariance.loading
            )));
        }
        if self.eval.samples == 0 {
            return Err(ConfigError::Invalid("evaluation set is empty".into()));
        }
        if self.trajectory.points < 2 {
            return Err(ConfigError::Invalid("trajectory needs at least 2 points".into()));
        }
        if !(self.trajectory.radius > 0.0) {
            return Err(ConfigError::Invalid("trajectory radius must be positive".into()));
        }
        Ok(())
    }

    /// Encoder shape implied by scenario and network sections.
    pub fn encoder_cfg(&self) -> EncoderConfig {
        EncoderConfig::new(
            self.scenario.slots,
            self.scenario.antennas(),
            self.network.width,
            self.network.blocks,
            self.network.latent_dim,
        )
    }

    /// CU shape implied by scenario and network sections.
    pub fn fusion_cfg(&self) -> FusionConfig {
        FusionConfig {
            bs_count: self.scenario.bs_count,
            subcarriers: self.scenario.subcarriers,
            latent_dim: self.network.latent_dim,
            token_dim: self.network.token_dim.unwrap_or(self.network.latent_dim),
            lstm_hidden: self.network.lstm_hidden,
            head_hidden: self.network.head_hidden,
            beta: self.network.beta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_text() -> String {
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"))
            .expect("desk config")
    }

    #[test]
    fn desk_config_parses_and_matches_the_reference_scenario() {
        let config = RunConfig::parse(&desk_text()).expect("parse");
        assert_eq!(config.scenario, ScenarioConfig::desk());
        let enc = config.encoder_cfg();
        assert_eq!(enc.input_channels, 2 * 2 * 2);
        assert_eq!(enc.latent_dim, 4);
        let fus = config.fusion_cfg();
        assert_eq!(fus.bs_count, 3);
        assert_eq!(fus.subcarriers, 8);
        assert_eq!(fus.latent_len(), 32, "desk embedding is 32 coefficients");
        assert_eq!(fus.token_dim, enc.latent_dim, "token width defaults to d_z");
    }

    #[test]
    fn full_scale_config_parses_with_reference_dimensions() {
        let text =
            std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/full.toml"))
                .expect("full config");
        let config = RunConfig::parse(&text).expect("parse");
        assert_eq!(config.scenario.bs_count, 6);
        assert_eq!(config.scenario.slots, 10);
        assert_eq!(config.scenario.antennas(), 8);
        assert_eq!(config.scenario.subcarriers, 24);
        assert_eq!(config.network.latent_dim, 32);
        assert_eq!(config.fusion_cfg().latent_len(), 768);
        assert_eq!(config.quant.bits, 10);
    }

    #[test]
    fn validation_rejects_corrupted_sections() {
        let base = desk_text();
        let cases = [
            ("bs_count = 3", "bs_count = 0"),
            ("width = 16", "width = 0"),
            ("beta = 1.0", "beta = -2.0"),
            ("bits = 10", "bits = 40"),
            ("percentile = 99.5", "percentile = 0.0"),
            ("realizations = 2000", "realizations = 0"),
            ("samples = 256\n\n[trajectory]", "samples = 0\n\n[trajectory]"),
            ("points = 24", "points = 1"),
            ("radius = 18.0", "radius = -1.0"),
        ];
        for (from, to) in cases {
            assert!(base.contains(from), "expected `{from}` in the desk config");
            let mutated = base.replacen(from, to, 1);
            assert!(RunConfig::parse(&mutated).is_err(), "`{to}` must be rejected");
        }
    }

    #[test]
    fn roundtrip_through_toml_preserves_the_config() {
        let config = RunConfig::parse(&desk_text()).expect("parse");
        let emitted = toml::to_string(&config).expect("serialize");
        let back = RunConfig::parse(&emitted).expect("reparse");
        assert_eq!(config, back);
    }
}
