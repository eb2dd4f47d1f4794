//! Experiment configuration: frozen defaults, file loading, validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::ObservationMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Benign,
    Forge,
    InformedForge,
    AblateCs,
    AblateProj,
    AblateSteps,
    AblateObservation,
    DistortionSweep,
    FprCalibration,
    Timing,
}

impl Mode {
    /// Modes whose aggregates are detection/success rates and therefore need
    /// enough trials for a meaningful estimate.
    pub fn reports_rates(self) -> bool {
        !matches!(self, Mode::Timing)
    }
}

/// One experiment cell. The `Default` impl is the frozen default config:
/// n=256, L=64, K=8, T=50, cs_ratio=0.8, proj_ratio=0.4, fpr=1e-10,
/// trials=100.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub t_steps: usize,
    pub cs_ratio: f64,
    pub proj_ratio: f64,
    pub fpr: f64,
    pub component_std: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub trials: usize,
    pub seed_base: u64,
    pub mode: Mode,
    pub observation_mode: ObservationMode,
    /// Attacker step count; defaults to the victim's `t_steps`.
    pub attacker_steps: Option<usize>,
    /// Estimated-matrix similarity for `informed_forge`.
    pub matrix_similarity: Option<f64>,
    /// Latent noise level for `distortion_sweep`.
    pub distortion_sigma: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 256,
            l: 64,
            k: 8,
            t_steps: 50,
            cs_ratio: 0.8,
            proj_ratio: 0.4,
            fpr: 1e-10,
            component_std: 0.15,
            beta_min: 1e-4,
            beta_max: 0.02,
            trials: 100,
            seed_base: 0,
            mode: Mode::Benign,
            observation_mode: ObservationMode::TrajectoryIntrinsic,
            attacker_steps: None,
            matrix_similarity: None,
            distortion_sigma: None,
        }
    }
}

impl ExperimentConfig {
    pub fn attacker_steps(&self) -> usize {
        self.attacker_steps.unwrap_or(self.t_steps)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn err(field: &'static str, message: impl Into<String>) -> ConfigError {
            ConfigError::Invalid {
                field,
                message: message.into(),
            }
        }
        if self.n < 2 {
            return Err(err("n", format!("must be >= 2, got {}", self.n)));
        }
        if self.l == 0 || !self.n.is_multiple_of(self.l) {
            return Err(err("l", format!("must divide n={}, got {}", self.n, self.l)));
        }
        if self.k < 1 {
            return Err(err("k", "must be >= 1"));
        }
        if self.t_steps < 1 {
            return Err(err("t_steps", "must be >= 1"));
        }
        if !(self.cs_ratio > 0.0 && self.cs_ratio <= 1.0) {
            return Err(err("cs_ratio", format!("must be in (0,1], got {}", self.cs_ratio)));
        }
        if (self.cs_ratio * self.n as f64).floor() < 1.0 {
            return Err(err("cs_ratio", "floor(cs_ratio*n) must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.proj_ratio) {
            return Err(err("proj_ratio", format!("must be in [0,1), got {}", self.proj_ratio)));
        }
        if !(self.fpr > 0.0 && self.fpr <= 1.0) {
            return Err(err("fpr", format!("must be in (0,1], got {}", self.fpr)));
        }
        if self.component_std <= 0.0 {
            return Err(err("component_std", "must be > 0"));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(err("beta_min", "need 0 < beta_min <= beta_max < 1"));
        }
        if self.trials == 0 {
            return Err(err("trials", "must be >= 1"));
        }
        if self.mode.reports_rates() && self.trials < 32 {
            return Err(err(
                "trials",
                format!("rate-reporting mode needs >= 32 trials, got {}", self.trials),
            ));
        }
        if let Some(s) = self.attacker_steps {
            if s < 1 {
                return Err(err("attacker_steps", "must be >= 1"));
            }
        }
        if let Some(s) = self.matrix_similarity {
            if !(0.0..=1.0).contains(&s) {
                return Err(err("matrix_similarity", format!("must be in [0,1], got {s}")));
            }
        }
        if self.mode == Mode::InformedForge && self.matrix_similarity.is_none() {
            return Err(err("matrix_similarity", "required for informed_forge mode"));
        }
        if let Some(s) = self.distortion_sigma {
            if s < 0.0 {
                return Err(err("distortion_sigma", "must be >= 0"));
            }
        }
        if self.mode == Mode::DistortionSweep && self.distortion_sigma.is_none() {
            return Err(err("distortion_sigma", "required for distortion_sweep mode"));
        }
        Ok(())
    }

    /// Loads TOML or JSON, picked by extension (.json is JSON, anything else
    /// is parsed as TOML).
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        Ok(cfg)
    }
}
