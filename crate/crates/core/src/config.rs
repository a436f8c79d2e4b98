//! Run configuration (TOML) and reproducibility manifests (JSON).
//!
//! Every section is optional and falls back to the built-in defaults. A
//! section that is present must be complete: this keeps a half-edited file
//! from silently mixing values. Unknown keys are rejected everywhere.
//!
//! ```toml
//! [task]
//! failure = "x"       # none | x | y | z
//! align = "y"         # full | x | y | z
//!
//! [run]
//! seeds = [0, 1, 2]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{FailureMode, SatelliteParams};
use crate::env::{AlignTarget, EpisodeConfig, RewardConfig, TaskSpec};
use crate::eval::{EvalConfig, EvalTarget};
use crate::nn::Architecture;
use crate::ppo::{Hyperparams, TrainSetup};

pub const MANIFEST_SCHEMA: &str = "manifest/v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default)]
    pub failure: FailureMode,
    #[serde(default)]
    pub align: AlignTarget,
    /// Accuracy band, rad; 0.01 for nominal and same-axis tasks, 0.05 otherwise.
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { hidden: Architecture::default().hidden }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// Output root; the command line and the `ATTCTL_OUT` variable take precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seeds: vec![0], out_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub satellite: SatelliteParams,
    #[serde(default)]
    pub task: TaskSection,
    /// Derived from the task when absent.
    #[serde(default)]
    pub reward: Option<RewardConfig>,
    /// Defaults with the task's horizon when absent.
    #[serde(default)]
    pub episode: Option<EpisodeConfig>,
    #[serde(default = "Hyperparams::desk")]
    pub ppo: Hyperparams,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            satellite: SatelliteParams::default(),
            task: TaskSection::default(),
            reward: None,
            episode: None,
            ppo: Hyperparams::desk(),
            network: NetworkSection::default(),
            run: RunSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })
    }

    /// Loads a TOML config, or the config embedded in a run manifest when the
    /// file is JSON.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg = if text.trim_start().starts_with('{') {
            let m: Manifest = serde_json::from_str(&text)
                .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
            m.config
        } else {
            Self::from_toml_str(&text, path)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Full-length schedule: 40 epochs, 10 seeds, 10000 evaluation episodes.
    pub fn paper_scale(mut self) -> Self {
        self.ppo.epochs = 40;
        self.ppo.steps_per_epoch = 15_000;
        self.run.seeds = (0..10).collect();
        self.eval.n_episodes = 10_000;
        self
    }

    pub fn task_spec(&self) -> Result<TaskSpec, ConfigError> {
        let t = &self.task;
        match t.threshold {
            Some(th) => TaskSpec::new(t.failure, t.align, th),
            None => TaskSpec::with_default_threshold(t.failure, t.align),
        }
        .map_err(invalid)
    }

    /// Same config retargeted at another task, keeping explicit overrides of
    /// the reward and episode sections other than their task-derived fields.
    pub fn for_task(&self, task: &TaskSpec) -> Self {
        let mut c = self.clone();
        c.task = TaskSection { failure: task.mode(), align: task.align(), threshold: Some(task.threshold()) };
        c.reward = self.reward.map(|r| RewardConfig { threshold: task.threshold(), ..r });
        c.episode = self.episode.map(|e| EpisodeConfig { horizon: task.default_horizon(), ..e });
        c
    }

    pub fn reward_config(&self) -> Result<RewardConfig, ConfigError> {
        let task = self.task_spec()?;
        Ok(self.reward.unwrap_or_else(|| RewardConfig::for_task(&task)))
    }

    pub fn episode_config(&self) -> Result<EpisodeConfig, ConfigError> {
        let task = self.task_spec()?;
        Ok(self.episode.unwrap_or(EpisodeConfig { horizon: task.default_horizon(), ..EpisodeConfig::default() }))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.network.hidden.clone(), ..Architecture::default() }
    }

    /// Checks every section; nothing is run until this passes.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let task = self.task_spec()?;
        let reward = self.reward_config()?;
        if (reward.threshold - task.threshold()).abs() > 0.0 {
            return Err(ConfigError::Invalid(format!(
                "reward.threshold = {} disagrees with the task accuracy {}",
                reward.threshold,
                task.threshold()
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds must list at least one seed".into()));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(ConfigError::Invalid("network.hidden must list positive layer widths".into()));
        }
        self.train_setup()?.validate().map_err(invalid)?;
        self.eval.validate().map_err(invalid)
    }

    pub fn train_setup(&self) -> Result<TrainSetup, ConfigError> {
        Ok(TrainSetup {
            params: self.satellite,
            task: self.task_spec()?,
            reward: self.reward_config()?,
            episode: self.episode_config()?,
            hp: self.ppo.clone(),
            arch: self.architecture(),
            config_hash: Some(self.hash()),
        })
    }

    pub fn eval_target(&self) -> Result<EvalTarget, ConfigError> {
        Ok(EvalTarget {
            params: self.satellite,
            task: self.task_spec()?,
            reward: self.reward_config()?,
            episode: self.episode_config()?,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub workers: Option<usize>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, workers: Option<usize>) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            seeds: config.run.seeds.clone(),
            workers,
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
    }
}
