//! Run configuration: one JSON document per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use evkf_core::experiment::Baseline;
use evkf_core::filter::EvkfConfig;
use evkf_core::metrics::MetricProtocol;
use evkf_core::simulate::System;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: System,
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub obs_dim: Option<usize>,
    pub trials: usize,
    /// Steps with online learning; the model is frozen afterwards.
    pub t_train: usize,
    /// Frozen steps the metrics are computed over. With 0 the metrics cover the training steps.
    pub t_eval: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub filter: FilterChoice,
    #[serde(default)]
    pub metrics: MetricProtocol,
    /// Worker threads for trials; the available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterChoice {
    Evkf {
        #[serde(default)]
        config: EvkfConfig,
        #[serde(default)]
        learner: Learner,
    },
    Kalman,
    Bpf {
        particles: usize,
    },
    Enkf {
        members: usize,
    },
}

impl FilterChoice {
    pub fn name(&self) -> &'static str {
        match self {
            FilterChoice::Evkf { .. } => "evkf",
            FilterChoice::Kalman => "kalman",
            FilterChoice::Bpf { .. } => "bpf",
            FilterChoice::Enkf { .. } => "enkf",
        }
    }

    pub fn baseline(&self) -> Option<Baseline> {
        match *self {
            FilterChoice::Bpf { particles } => Some(Baseline::Bpf { particles }),
            FilterChoice::Enkf { members } => Some(Baseline::Enkf { members }),
            _ => None,
        }
    }
}

/// The dynamics model the filter starts from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learner {
    /// The true system dynamics.
    #[default]
    Truth,
    /// A freshly initialised network of the system's family. Gaussian networks use a fixed
    /// isotropic state noise of the given variance.
    Network {
        #[serde(default = "default_gaussian_noise")]
        gaussian_noise: f64,
    },
    /// A Gaussian network on a non-Gaussian system, for family-mismatch comparisons.
    GaussianNetwork { gaussian_noise: f64 },
}

fn default_gaussian_noise() -> f64 {
    0.01
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let Some(out) = &overrides.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(trials) = overrides.trials {
            config.trials = trials;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.into()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.t_train + self.t_eval == 0 {
            return bad("t_train + t_eval must be at least 1");
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1");
        }
        match &self.filter {
            FilterChoice::Evkf { config, learner } => {
                config.validate().map_err(|e| HarnessError::Config(format!("filter.config: {e}")))?;
                if let Learner::Network { gaussian_noise } | Learner::GaussianNetwork { gaussian_noise } = learner {
                    if !(*gaussian_noise > 0.0) {
                        return bad("filter.learner.gaussian_noise must be positive");
                    }
                }
            }
            FilterChoice::Bpf { particles: 0 } => return bad("filter.particles must be at least 1"),
            FilterChoice::Enkf { members } if *members < 2 => return bad("filter.members must be at least 2"),
            _ => {}
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.t_train + self.t_eval
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go and how many threads run.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.workers = None;
        let bytes = serde_json::to_vec(&canonical).expect("run configs always serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Seed of the dataset for one trial.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }
}
