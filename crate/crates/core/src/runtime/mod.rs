//! Agent lifecycle: the parent loop, child dispatch under depth and
//! concurrency limits, timeouts and failure handling.
//!
//! The default scheduler is single threaded and driven by a virtual clock,
//! so a run is a pure function of its workload, configuration and seed.

mod backend;
mod engine;
mod tree;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::memory::{Embedder, MemoryItem, MemoryStore, RelevanceWeights, Tier};
use crate::policy::SpawnPolicyConfig;
use crate::protocol::ValidationIssue;
use crate::skills::{SkillLibrary, DEFAULT_INHERIT_THRESHOLD, DEFAULT_PROMOTE_THRESHOLD};

pub use backend::{
    BackendError, ChildBackend, ChildScript, HttpTransport, ScriptedBackend, ServiceBackend, Transport,
    TransportError, ENDPOINT_ENV, TOKEN_ENV,
};
pub use engine::{
    await_children, handle_child_failure, run_parent_loop, spawn_child, ChildHandle, ChildOutcome, Event,
    FailureKind, RunOutcome, SpawnRecord, SpawnRequest, SpawnVerdict, TrajectoryStep,
};
pub use tree::{AgentId, NodeStatus, SpawnTree, TreeNode, TreeViolation};

/// Source of run-relative time in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Manually advanced clock for simulation.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Cell<f64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// # Panics
    /// If `dt` is negative or not finite.
    pub fn advance(&self, dt: f64) {
        assert!(dt.is_finite() && dt >= 0.0, "clock cannot move backwards");
        self.now.set(self.now.get() + dt);
    }

    /// Moves to `t` if it is not in the past.
    pub fn advance_to(&self, t: f64) {
        if t > self.now.get() {
            self.now.set(t);
        }
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        self.now.get()
    }
}

/// Seconds elapsed since construction.
#[derive(Debug, Clone)]
pub struct WallClock {
    start: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Everything an agent owns: memory, skills and its view of the files.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub memory: MemoryStore<f64>,
    pub skills: SkillLibrary,
    pub files: BTreeMap<String, Vec<String>>,
}

impl AgentState {
    pub fn new(memory: MemoryStore<f64>, skills: SkillLibrary) -> Self {
        Self {
            memory,
            skills,
            files: BTreeMap::new(),
        }
    }

    pub fn episodic_len(&self) -> usize {
        self.memory.tier_len(Tier::Episodic)
    }

    /// Records a note in episodic memory at the current step, suffixing the
    /// id if it is already taken.
    pub fn note(&mut self, id: &str, text: &str, embedder: &dyn Embedder<f64>) {
        let step = self.memory.current_step();
        let mut candidate = id.to_string();
        let mut n = 2;
        while self.memory.contains(&candidate) {
            candidate = format!("{id}-{n}");
            n += 1;
        }
        let item = MemoryItem::new(candidate, Tier::Episodic, text, step, embedder);
        self.memory
            .insert(item)
            .expect("fresh id with the store's own embedder");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParentMode {
    /// The parent waits until all of its children have joined.
    #[default]
    Pause,
    /// The parent keeps stepping while children run.
    Continue,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("child timeout must be positive and finite, got {0}")]
    Timeout(f64),
    #[error("step duration must be nonnegative and finite, got {0}")]
    StepDuration(f64),
    #[error("concurrent limit must be at least 1")]
    ConcurrentLimit,
    #[error("{0}")]
    Invalid(String),
}

/// Limits and knobs of the scheduler. Retries are never attempted.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub child_timeout: f64,
    pub max_depth: u32,
    pub concurrent_limit: usize,
    pub seed: u64,
    pub parent_mode: ParentMode,
    /// Virtual seconds consumed by one agent step.
    pub step_duration: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            child_timeout: 600.0,
            max_depth: 3,
            concurrent_limit: 4,
            seed: 0,
            parent_mode: ParentMode::Pause,
            step_duration: 1.0,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.child_timeout.is_finite() && self.child_timeout > 0.0) {
            return Err(ConfigError::Timeout(self.child_timeout));
        }
        if !(self.step_duration.is_finite() && self.step_duration >= 0.0) {
            return Err(ConfigError::StepDuration(self.step_duration));
        }
        if self.concurrent_limit == 0 {
            return Err(ConfigError::ConcurrentLimit);
        }
        Ok(())
    }
}

/// Decision-making parameters shared by every agent in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    pub spawn: SpawnPolicyConfig<f64>,
    pub relevance: RelevanceWeights<f64>,
    pub relevance_threshold: f64,
    pub inherit_threshold: f64,
    pub promote_threshold: f64,
}

impl Default for AgentPolicy {
    fn default() -> Self {
        Self {
            spawn: SpawnPolicyConfig::default(),
            relevance: RelevanceWeights::default(),
            relevance_threshold: 0.5,
            inherit_threshold: DEFAULT_INHERIT_THRESHOLD,
            promote_threshold: DEFAULT_PROMOTE_THRESHOLD,
        }
    }
}

impl AgentPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.spawn.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.relevance
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, v) in [
            ("relevance threshold", self.relevance_threshold),
            ("inherit threshold", self.inherit_threshold),
            ("promote threshold", self.promote_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Renders validation issues as one line.
pub(crate) fn join_issues(issues: &[ValidationIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
