use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::DEFAULT_SEMANTIC_P;
use crate::memory::{HashEmbedder, MemoryItem, MemoryStore, Tier};
use crate::policy::Specialization;
use crate::protocol::TaskSpec;
use crate::runtime::{AgentState, ChildScript, TrajectoryStep};
use crate::skills::{Skill, SkillLibrary};

pub const WORKLOAD_SCHEMA: &str = "agentspawn-workload";
pub const WORKLOAD_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid JSON: {0}")]
    Syntax(String),
    #[error("unsupported header: {0}")]
    Header(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value at {path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> WorkloadError {
    WorkloadError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

/// Task as written in a workload file, with references spelled out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFixture {
    pub description: String,
    #[serde(default)]
    pub constraints: Vec<String>,
    #[serde(default)]
    pub expected_outcome: String,
    #[serde(default)]
    pub referenced_files: BTreeSet<String>,
    #[serde(default)]
    pub referenced_symbols: BTreeSet<String>,
}

impl TaskFixture {
    pub fn new(description: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            constraints: Vec::new(),
            expected_outcome: String::new(),
            referenced_files: BTreeSet::new(),
            referenced_symbols: BTreeSet::new(),
        }
    }
}

impl From<&TaskFixture> for TaskSpec {
    fn from(t: &TaskFixture) -> Self {
        TaskSpec {
            description: t.description.clone(),
            constraints: t.constraints.clone(),
            expected_outcome: t.expected_outcome.clone(),
            referenced_files: t.referenced_files.clone(),
            referenced_symbols: t.referenced_symbols.clone(),
        }
    }
}

/// Memory item without its embedding, which is recomputed on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryFixture {
    pub id: String,
    pub tier: Tier,
    pub content: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub referenced_files: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub referenced_symbols: BTreeSet<String>,
    pub created_at_step: u64,
}

impl MemoryFixture {
    pub fn to_item(&self, embedder: &HashEmbedder) -> MemoryItem<f64> {
        MemoryItem::new(self.id.clone(), self.tier, self.content.clone(), self.created_at_step, embedder)
            .with_files(self.referenced_files.iter().cloned())
            .with_symbols(self.referenced_symbols.iter().cloned())
    }
}

/// Batch of synthetic pairwise conflicts pushed through the coherence
/// protocol alongside the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictSpec {
    pub count: usize,
    /// Probability that a scenario's two diffs are line-disjoint.
    pub disjoint_fraction: f64,
    #[serde(default = "default_lines")]
    pub lines_per_file: usize,
}

fn default_lines() -> usize {
    40
}

fn default_dim() -> usize {
    HashEmbedder::DEFAULT_DIM
}

fn default_p() -> f64 {
    DEFAULT_SEMANTIC_P
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub schema: String,
    pub version: u32,
    pub name: String,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    /// Memory step when the trajectory starts.
    #[serde(default)]
    pub start_step: u64,
    pub task: TaskFixture,
    #[serde(default)]
    pub files: BTreeMap<String, Vec<String>>,
    pub memory: Vec<MemoryFixture>,
    #[serde(default)]
    pub skills: Vec<Skill>,
    pub trajectory: Vec<TrajectoryStep>,
    #[serde(default)]
    pub children: BTreeMap<Specialization, Vec<ChildScript>>,
    /// Success probability of the semantic merge backend.
    #[serde(default = "default_p")]
    pub p_semantic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflicts: Option<ConflictSpec>,
}

impl WorkloadSpec {
    pub fn new(name: impl Into<String>, task: TaskFixture) -> Self {
        Self {
            schema: WORKLOAD_SCHEMA.into(),
            version: WORKLOAD_VERSION,
            name: name.into(),
            embedding_dim: HashEmbedder::DEFAULT_DIM,
            start_step: 0,
            task,
            files: BTreeMap::new(),
            memory: Vec::new(),
            skills: Vec::new(),
            trajectory: Vec::new(),
            children: BTreeMap::new(),
            p_semantic: DEFAULT_SEMANTIC_P,
            conflicts: None,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::from(&self.task)
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.embedding_dim)
    }

    pub fn memory_store(&self) -> MemoryStore<f64> {
        let emb = self.embedder();
        let mut store = MemoryStore::new(self.embedding_dim).with_step(self.start_step);
        for m in &self.memory {
            store.insert(m.to_item(&emb)).expect("validated workload");
        }
        store
    }

    /// Root agent state; `inherit_threshold` comes from the run config.
    pub fn initial_state(&self, inherit_threshold: f64) -> AgentState {
        let skills = SkillLibrary::with_skills(inherit_threshold, self.skills.iter().cloned()).expect("validated workload");
        let mut state = AgentState::new(self.memory_store(), skills);
        state.files = self.files.clone();
        state
    }

    /// Checks every invariant, naming the offending field.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.schema != WORKLOAD_SCHEMA {
            return Err(WorkloadError::Header(format!("schema `{}` is not `{WORKLOAD_SCHEMA}`", self.schema)));
        }
        if self.version != WORKLOAD_VERSION {
            return Err(WorkloadError::Header(format!("version {} is not {WORKLOAD_VERSION}", self.version)));
        }
        if self.embedding_dim == 0 {
            return Err(invalid("embedding_dim", "must be positive"));
        }
        self.task_spec()
            .validate()
            .map_err(|e| invalid("task", e.to_string()))?;
        if self.trajectory.is_empty() {
            return Err(invalid("trajectory", "must not be empty"));
        }
        for (i, step) in self.trajectory.iter().enumerate() {
            check_step(&format!("trajectory[{i}]"), step)?;
        }
        let mut ids = BTreeSet::new();
        for (i, m) in self.memory.iter().enumerate() {
            if !ids.insert(&m.id) {
                return Err(invalid(format!("memory[{i}].id"), format!("duplicate id `{}`", m.id)));
            }
            if m.created_at_step > self.start_step {
                return Err(invalid(
                    format!("memory[{i}].created_at_step"),
                    format!("{} is after start_step {}", m.created_at_step, self.start_step),
                ));
            }
        }
        let mut skill_ids = BTreeSet::new();
        for (i, s) in self.skills.iter().enumerate() {
            s.validate().map_err(|e| invalid(format!("skills[{i}]"), e.to_string()))?;
            if !skill_ids.insert(&s.id) {
                return Err(invalid(format!("skills[{i}].id"), format!("duplicate id `{}`", s.id)));
            }
        }
        for (spec, scripts) in &self.children {
            for (i, s) in scripts.iter().enumerate() {
                let path = format!("children.{spec}[{i}]");
                s.validate().map_err(|e| invalid(path.clone(), e))?;
                for (j, step) in s.trajectory.iter().enumerate() {
                    check_step(&format!("{path}.trajectory[{j}]"), step)?;
                }
            }
        }
        if !(0.0..=1.0).contains(&self.p_semantic) {
            return Err(invalid("p_semantic", format!("{} outside [0, 1]", self.p_semantic)));
        }
        if let Some(c) = &self.conflicts {
            if !(0.0..=1.0).contains(&c.disjoint_fraction) {
                return Err(invalid(
                    "conflicts.disjoint_fraction",
                    format!("{} outside [0, 1]", c.disjoint_fraction),
                ));
            }
            if c.lines_per_file < 4 {
                return Err(invalid("conflicts.lines_per_file", "must be at least 4"));
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("workload serializes");
        s.push('\n');
        s
    }
}

fn check_step(path: &str, step: &TrajectoryStep) -> Result<(), WorkloadError> {
    let m = &step.metrics;
    for (name, v) in [
        ("I_f", m.interdependency),
        ("C_c", m.cyclomatic),
        ("F_c", m.failure_cascade),
        ("O_c", m.context_occupancy),
        ("U_c", m.uncertainty),
    ] {
        let ok = v.is_finite() && v >= 0.0 && (name != "O_c" || v <= 1.0);
        if !ok {
            let range = if name == "O_c" { "[0, 1]" } else { "[0, inf)" };
            return Err(invalid(format!("{path}.metrics.{name}"), format!("{v} outside {range}")));
        }
    }
    if step.parallel == 0 {
        return Err(invalid(format!("{path}.parallel"), "must be at least 1"));
    }
    Ok(())
}

/// Parses and validates workload JSON.
pub fn parse_workload(text: &str) -> Result<WorkloadSpec, WorkloadError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| WorkloadError::Syntax(e.to_string()))?;
    match value.get("schema").and_then(|v| v.as_str()) {
        Some(WORKLOAD_SCHEMA) => {}
        Some(other) => return Err(WorkloadError::Header(format!("schema `{other}` is not `{WORKLOAD_SCHEMA}`"))),
        None => return Err(WorkloadError::Header("missing `schema`".into())),
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(WORKLOAD_VERSION) => {}
        Some(v) => return Err(WorkloadError::Header(format!("version {v} is not {WORKLOAD_VERSION}"))),
        None => return Err(WorkloadError::Header("missing `version`".into())),
    }
    let spec: WorkloadSpec = serde_path_to_error::deserialize(value).map_err(|e| WorkloadError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_workload(path: &Path) -> Result<WorkloadSpec, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_workload(&text)
}

pub fn save_workload(spec: &WorkloadSpec, path: &Path) -> Result<(), WorkloadError> {
    std::fs::write(path, spec.to_json()).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
