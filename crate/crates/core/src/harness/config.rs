use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::RelevanceWeights;
use crate::policy::SpawnPolicyConfig;
use crate::runtime::{AgentPolicy, ParentMode, RuntimeConfig};
use crate::skills::{DEFAULT_INHERIT_THRESHOLD, DEFAULT_PROMOTE_THRESHOLD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigFileError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("config error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpawnWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
}

impl Default for SpawnWeights {
    fn default() -> Self {
        Self {
            w1: 0.30,
            w2: 0.20,
            w3: 0.25,
            w4: 0.15,
            w5: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Temporal decay per memory step.
    pub lambda: f64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.2,
            delta: 0.2,
            lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkillsConfig {
    pub inherit_threshold: f64,
    pub promote_threshold: f64,
}

impl Default for SkillsConfig {
    fn default() -> Self {
        Self {
            inherit_threshold: DEFAULT_INHERIT_THRESHOLD,
            promote_threshold: DEFAULT_PROMOTE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ParentModeName {
    #[default]
    Pause,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub parent_mode: ParentModeName,
    pub step_duration: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            parent_mode: ParentModeName::Pause,
            step_duration: 1.0,
        }
    }
}

/// Unit prices for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub price_per_1k_tokens: f64,
    pub price_per_call: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            price_per_1k_tokens: 0.01,
            price_per_call: 0.0,
        }
    }
}

/// Run configuration file. Every key is optional; omitted keys take the
/// default hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub spawn_threshold: f64,
    pub memory_threshold: f64,
    pub max_spawn_depth: u32,
    pub concurrent_spawn_limit: usize,
    /// Seconds.
    pub child_timeout: f64,
    pub cooldown_steps: u64,
    pub spawn_weights: SpawnWeights,
    pub relevance_weights: RelevanceConfig,
    pub skills: SkillsConfig,
    pub scheduler: SchedulerConfig,
    pub cost: CostConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spawn_threshold: 0.7,
            memory_threshold: 0.5,
            max_spawn_depth: 3,
            concurrent_spawn_limit: 4,
            child_timeout: 600.0,
            cooldown_steps: 5,
            spawn_weights: SpawnWeights::default(),
            relevance_weights: RelevanceConfig::default(),
            skills: SkillsConfig::default(),
            scheduler: SchedulerConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn policy(&self) -> AgentPolicy {
        let w = self.spawn_weights;
        let r = self.relevance_weights;
        AgentPolicy {
            spawn: SpawnPolicyConfig {
                weights: [w.w1, w.w2, w.w3, w.w4, w.w5],
                spawn_threshold: self.spawn_threshold,
                max_depth: self.max_spawn_depth,
                concurrent_limit: self.concurrent_spawn_limit,
                cooldown_steps: self.cooldown_steps,
            },
            relevance: RelevanceWeights {
                alpha: r.alpha,
                beta: r.beta,
                gamma: r.gamma,
                delta_w: r.delta,
                lambda_decay: r.lambda,
            },
            relevance_threshold: self.memory_threshold,
            inherit_threshold: self.skills.inherit_threshold,
            promote_threshold: self.skills.promote_threshold,
        }
    }

    pub fn runtime(&self, seed: u64) -> RuntimeConfig {
        RuntimeConfig {
            child_timeout: self.child_timeout,
            max_depth: self.max_spawn_depth,
            concurrent_limit: self.concurrent_spawn_limit,
            seed,
            parent_mode: match self.scheduler.parent_mode {
                ParentModeName::Pause => ParentMode::Pause,
                ParentModeName::Continue => ParentMode::Continue,
            },
            step_duration: self.scheduler.step_duration,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        self.policy()
            .validate()
            .map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        self.runtime(0)
            .validate()
            .map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        let c = self.cost;
        if !(c.price_per_1k_tokens.is_finite() && c.price_per_1k_tokens >= 0.0 && c.price_per_call.is_finite() && c.price_per_call >= 0.0) {
            return Err(ConfigFileError::Invalid("prices must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigFileError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigFileError::Parse {
        path: String::new(),
        message: e.to_string(),
    })?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigFileError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigFileError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigFileError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}
