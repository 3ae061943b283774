//! Run configuration for the command-line pipeline.
//!
//! A [`RunConfig`] collects every tunable the subcommands share: the latent
//! split, the prior weights, stage epochs, batching, worker threads, and the
//! three well-known directories (corpus, checkpoints, outputs). Values
//! resolve with flag > config file > built-in default precedence; the JSON
//! config file may set any subset of fields and rejects unknown keys.
//!
//! Every run writes a [`RunRecord`] (`run.json`) into its output directory:
//! the fully resolved configuration, the binary version, and the run's
//! metric outputs, so a run can be reproduced from its artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::LinkConfig;
use crate::priors::SmoothnessVariant;

/// Version string recorded in every `run.json`.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Smoothness penalty selector: the three shapes of
/// [`SmoothnessVariant`] plus `none`, which disables the prior entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothnessChoice {
    Mse,
    Q,
    LogMse,
    None,
}

impl SmoothnessChoice {
    /// The loss shape, or `None` when the prior is disabled.
    pub fn variant(self) -> Option<SmoothnessVariant> {
        match self {
            SmoothnessChoice::Mse => Some(SmoothnessVariant::Mse),
            SmoothnessChoice::Q => Some(SmoothnessVariant::Q),
            SmoothnessChoice::LogMse => Some(SmoothnessVariant::LogMse),
            SmoothnessChoice::None => None,
        }
    }
}

impl FromStr for SmoothnessChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(SmoothnessChoice::Mse),
            "q" => Ok(SmoothnessChoice::Q),
            "logmse" => Ok(SmoothnessChoice::LogMse),
            "none" => Ok(SmoothnessChoice::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown smoothness variant {other:?}; expected mse, q, logmse or none"
            ))),
        }
    }
}

impl std::fmt::Display for SmoothnessChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SmoothnessChoice::Mse => "mse",
            SmoothnessChoice::Q => "q",
            SmoothnessChoice::LogMse => "logmse",
            SmoothnessChoice::None => "none",
        };
        f.write_str(name)
    }
}

/// Shared run settings. `epochs`, when set, overrides the per-stage epoch
/// defaults of whichever stage the subcommand runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; all stage generators derive from it.
    pub seed: u64,
    /// Audio latent dimension.
    pub d: usize,
    /// Style prefix width.
    pub m: usize,
    /// Cycle-consistency weight.
    pub lambda_cycle: f64,
    /// Temporal-smoothness weight.
    pub lambda_p: f64,
    /// Smoothness penalty shape, or `none` to disable the prior.
    pub smoothness: SmoothnessChoice,
    /// Epochs for the invoked training stage; stage defaults when unset.
    pub epochs: Option<usize>,
    /// Samples per optimizer step.
    pub batch: usize,
    /// Worker threads for batch gradient accumulation.
    pub threads: usize,
    /// Corpus directory (WAV files plus manifest).
    pub corpus: PathBuf,
    /// Directory holding model checkpoints.
    pub checkpoints: PathBuf,
    /// Default output directory for run records and reports.
    pub outputs: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 64,
            m: 16,
            lambda_cycle: 10.0,
            lambda_p: 1e3,
            smoothness: SmoothnessChoice::LogMse,
            epochs: None,
            batch: 32,
            threads: 1,
            corpus: PathBuf::from("corpus"),
            checkpoints: PathBuf::from("checkpoints"),
            outputs: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads a JSON config file. Missing fields fall back to the defaults;
    /// unknown fields are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.d {
            return Err(Error::InvalidArgument(format!(
                "style dimension m = {} must satisfy 0 < m < d = {}",
                self.m, self.d
            )));
        }
        if !self.lambda_p.is_finite()
            || self.lambda_p < 0.0
            || !self.lambda_cycle.is_finite()
            || self.lambda_cycle < 0.0
        {
            return Err(Error::InvalidArgument(
                "lambda_p and lambda_cycle must be finite and nonnegative".into(),
            ));
        }
        if self.batch == 0 || self.threads == 0 {
            return Err(Error::InvalidArgument(
                "batch and threads must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Resolves the training hyperparameters. `smoothness: none` zeroes the
    /// prior weight; an explicit `epochs` applies to every stage (only the
    /// invoked stage reads its value).
    pub fn link_config(&self) -> LinkConfig {
        let mut cfg = LinkConfig {
            d: self.d,
            m: self.m,
            seed: self.seed,
            batch_size: self.batch,
            lambda_cycle: self.lambda_cycle,
            threads: self.threads,
            ..LinkConfig::default()
        };
        match self.smoothness.variant() {
            Some(variant) => {
                cfg.lambda_p = self.lambda_p;
                cfg.smoothness = variant;
            }
            None => cfg.lambda_p = 0.0,
        }
        if let Some(epochs) = self.epochs {
            cfg.audio_epochs = epochs;
            cfg.image_epochs = epochs;
            cfg.joint_epochs = epochs;
        }
        cfg
    }
}

/// The `run.json` payload: resolved config, binary version, and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub metrics: serde_json::Value,
}

impl RunRecord {
    pub fn new(command: &str, config: RunConfig, metrics: serde_json::Value) -> Self {
        Self {
            version: VERSION.to_string(),
            command: command.to_string(),
            config,
            metrics,
        }
    }

    /// Writes `run.json` into `dir`, creating the directory if needed.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("run.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::SmoothnessVariant;

    #[test]
    fn defaults_match_paper_weights() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lambda_cycle, 10.0);
        assert_eq!(cfg.lambda_p, 1e3);
        assert_eq!(cfg.smoothness, SmoothnessChoice::LogMse);
        assert_eq!(cfg.d, 64);
        assert_eq!(cfg.m, 16);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_file_overrides_defaults_only_where_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 7, "lambda_cycle": 0.5}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lambda_cycle, 0.5);
        assert_eq!(cfg.d, RunConfig::default().d);
        assert_eq!(cfg.batch, RunConfig::default().batch);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"sede": 7}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig {
            m: 64,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = RunConfig {
            lambda_p: -1.0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = RunConfig {
            threads: 0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn smoothness_choice_parses_and_maps() {
        assert_eq!("logmse".parse::<SmoothnessChoice>().unwrap(), SmoothnessChoice::LogMse);
        assert_eq!("NONE".parse::<SmoothnessChoice>().unwrap(), SmoothnessChoice::None);
        assert!("l2".parse::<SmoothnessChoice>().is_err());
        assert_eq!(
            SmoothnessChoice::Q.variant(),
            Some(SmoothnessVariant::Q)
        );
        assert_eq!(SmoothnessChoice::None.variant(), None);
    }

    #[test]
    fn link_config_resolution() {
        let mut rc = RunConfig {
            seed: 3,
            d: 16,
            m: 4,
            batch: 8,
            threads: 2,
            ..RunConfig::default()
        };
        let lc = rc.link_config();
        assert_eq!(lc.d, 16);
        assert_eq!(lc.m, 4);
        assert_eq!(lc.seed, 3);
        assert_eq!(lc.batch_size, 8);
        assert_eq!(lc.threads, 2);
        assert_eq!(lc.audio_epochs, LinkConfig::default().audio_epochs);
        assert_eq!(lc.joint_epochs, LinkConfig::default().joint_epochs);
        assert_eq!(lc.lambda_p, 1e3);
        assert_eq!(lc.smoothness, SmoothnessVariant::LogMse);

        rc.epochs = Some(5);
        rc.smoothness = SmoothnessChoice::None;
        let lc = rc.link_config();
        assert_eq!(lc.audio_epochs, 5);
        assert_eq!(lc.image_epochs, 5);
        assert_eq!(lc.joint_epochs, 5);
        assert_eq!(lc.lambda_p, 0.0);
    }

    #[test]
    fn run_record_round_trips_and_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let record = RunRecord::new(
            "train-audio",
            RunConfig::default(),
            serde_json::json!({"final_loss": 1.25}),
        );
        let path = record.write(dir.path()).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let parsed: RunRecord = serde_json::from_slice(&bytes_a).unwrap();
        assert_eq!(parsed, record);
        assert_eq!(parsed.version, VERSION);
        record.write(dir.path()).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
}
