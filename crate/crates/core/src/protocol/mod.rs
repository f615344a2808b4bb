//! Spawn and resume packages exchanged between a parent and its children.
//!
//! A [`SpawnPackage`] is the snapshot a parent hands a child: the memory
//! slice, inherited skills, execution context, task and the metrics that
//! triggered the spawn. A [`ResumePackage`] is what the child returns. Both
//! travel as canonical JSON (see [`codec`]) and double as on-disk
//! checkpoints.

pub mod codec;
mod replay;
mod trace;
mod validate;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::Diff;
use crate::memory::{MemoryItem, MemorySlice, Tier};
use crate::policy::ComplexityMetrics;
use crate::runtime::Clock;
use crate::skills::Skill;

pub use codec::{decode_package, encode_package, DecodeError, Package};
pub use replay::{replay_resume, DiffStaging, ReplayConfig, ReplayReport};
pub use trace::{summarize_trace, KeyDecisionSummarizer, TraceSummarizer};
pub use validate::{validate_resume, ValidationIssue};

/// Constraint prefixes that carry a task's referenced files and symbols on
/// the wire, where the task object only has description, constraints and
/// expected outcome.
pub const FILE_REF_PREFIX: &str = "touches file: ";
pub const SYMBOL_REF_PREFIX: &str = "touches symbol: ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("task description must not be empty")]
    EmptyDescription,
    #[error("constraint `{0}` uses a reserved prefix")]
    ReservedConstraint(String),
    #[error("trace summarizer returned steps out of order at index {0}")]
    SummaryOutOfOrder(usize),
    #[error("trace summarizer returned an action not present in the trace (step {0})")]
    SummaryNotSubset(u64),
    #[error("trace summarizer returned an empty summary for a non-empty trace")]
    EmptySummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TaskWire", try_from = "TaskWire")]
pub struct TaskSpec {
    pub description: String,
    pub constraints: Vec<String>,
    pub expected_outcome: String,
    pub referenced_files: BTreeSet<String>,
    pub referenced_symbols: BTreeSet<String>,
}

impl TaskSpec {
    pub fn new(description: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            constraints: Vec::new(),
            expected_outcome: String::new(),
            referenced_files: BTreeSet::new(),
            referenced_symbols: BTreeSet::new(),
        }
    }

    pub fn with_files<I: IntoIterator<Item = T>, T: Into<String>>(mut self, files: I) -> Self {
        self.referenced_files.extend(files.into_iter().map(Into::into));
        self
    }

    pub fn with_symbols<I: IntoIterator<Item = T>, T: Into<String>>(mut self, symbols: I) -> Self {
        self.referenced_symbols.extend(symbols.into_iter().map(Into::into));
        self
    }

    pub fn with_expected_outcome(mut self, outcome: impl Into<String>) -> Self {
        self.expected_outcome = outcome.into();
        self
    }

    pub fn with_constraint(mut self, c: impl Into<String>) -> Self {
        self.constraints.push(c.into());
        self
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.description.trim().is_empty() {
            return Err(ProtocolError::EmptyDescription);
        }
        if let Some(c) = self
            .constraints
            .iter()
            .find(|c| c.starts_with(FILE_REF_PREFIX) || c.starts_with(SYMBOL_REF_PREFIX))
        {
            return Err(ProtocolError::ReservedConstraint(c.clone()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskWire {
    description: String,
    constraints: Vec<String>,
    expected_outcome: String,
}

impl From<TaskSpec> for TaskWire {
    fn from(t: TaskSpec) -> Self {
        let mut constraints = t.constraints;
        constraints.extend(t.referenced_files.iter().map(|f| format!("{FILE_REF_PREFIX}{f}")));
        constraints.extend(t.referenced_symbols.iter().map(|s| format!("{SYMBOL_REF_PREFIX}{s}")));
        TaskWire {
            description: t.description,
            constraints,
            expected_outcome: t.expected_outcome,
        }
    }
}

impl TryFrom<TaskWire> for TaskSpec {
    type Error = ProtocolError;

    fn try_from(w: TaskWire) -> Result<Self, Self::Error> {
        let mut task = TaskSpec::new(w.description).with_expected_outcome(w.expected_outcome);
        for c in w.constraints {
            if let Some(f) = c.strip_prefix(FILE_REF_PREFIX) {
                task.referenced_files.insert(f.to_string());
            } else if let Some(s) = c.strip_prefix(SYMBOL_REF_PREFIX) {
                task.referenced_symbols.insert(s.to_string());
            } else {
                task.constraints.push(c);
            }
        }
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionContext {
    pub repo_path: String,
    pub current_file: String,
    pub line_number: u64,
    pub pending_changes: Vec<Diff>,
}

impl ExecutionContext {
    pub fn new(repo_path: impl Into<String>) -> Self {
        Self {
            repo_path: repo_path.into(),
            current_file: String::new(),
            line_number: 0,
            pending_changes: Vec::new(),
        }
    }
}

/// Memory slice as carried in a spawn package, grouped by tier.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "MemoryWire", try_from = "MemoryWire")]
pub struct PackageMemory {
    pub episodic: Vec<MemoryItem<f64>>,
    pub semantic: Vec<MemoryItem<f64>>,
    pub working: Vec<MemoryItem<f64>>,
}

impl PackageMemory {
    pub fn from_slice(slice: &MemorySlice<f64>) -> Self {
        let mut m = PackageMemory::default();
        for item in &slice.items {
            m.group_mut(item.tier).push(item.clone());
        }
        m
    }

    pub fn group(&self, tier: Tier) -> &[MemoryItem<f64>] {
        match tier {
            Tier::Episodic => &self.episodic,
            Tier::Semantic => &self.semantic,
            Tier::Working => &self.working,
        }
    }

    fn group_mut(&mut self, tier: Tier) -> &mut Vec<MemoryItem<f64>> {
        match tier {
            Tier::Episodic => &mut self.episodic,
            Tier::Semantic => &mut self.semantic,
            Tier::Working => &mut self.working,
        }
    }

    pub fn items(&self) -> impl Iterator<Item = &MemoryItem<f64>> {
        self.episodic.iter().chain(&self.semantic).chain(&self.working)
    }

    pub fn len(&self) -> usize {
        self.episodic.len() + self.semantic.len() + self.working.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireItem {
    id: String,
    content: String,
    referenced_files: BTreeSet<String>,
    referenced_symbols: BTreeSet<String>,
    created_at_step: u64,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryWire {
    episodic: Vec<WireItem>,
    semantic: Vec<WireItem>,
    working: Vec<WireItem>,
}

impl From<PackageMemory> for MemoryWire {
    fn from(m: PackageMemory) -> Self {
        let conv = |items: Vec<MemoryItem<f64>>| {
            items
                .into_iter()
                .map(|i| WireItem {
                    id: i.id,
                    content: i.content,
                    referenced_files: i.referenced_files,
                    referenced_symbols: i.referenced_symbols,
                    created_at_step: i.created_at_step,
                    embedding: i.embedding,
                })
                .collect()
        };
        MemoryWire {
            episodic: conv(m.episodic),
            semantic: conv(m.semantic),
            working: conv(m.working),
        }
    }
}

impl From<MemoryWire> for PackageMemory {
    fn from(w: MemoryWire) -> Self {
        let conv = |items: Vec<WireItem>, tier: Tier| {
            items
                .into_iter()
                .map(|i| MemoryItem {
                    id: i.id,
                    tier,
                    content: i.content,
                    referenced_files: i.referenced_files,
                    referenced_symbols: i.referenced_symbols,
                    created_at_step: i.created_at_step,
                    embedding: i.embedding,
                })
                .collect()
        };
        PackageMemory {
            episodic: conv(w.episodic, Tier::Episodic),
            semantic: conv(w.semantic, Tier::Semantic),
            working: conv(w.working, Tier::Working),
        }
    }
}

/// Raw metrics that triggered the spawn plus the resulting score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnMetrics {
    #[serde(rename = "I_f")]
    pub interdependency: f64,
    #[serde(rename = "C_c")]
    pub cyclomatic: f64,
    #[serde(rename = "F_c")]
    pub failure_cascade: f64,
    #[serde(rename = "O_c")]
    pub context_occupancy: f64,
    #[serde(rename = "U_c")]
    pub uncertainty: f64,
    #[serde(rename = "S_spawn")]
    pub spawn_score: f64,
}

impl SpawnMetrics {
    pub fn new(metrics: &ComplexityMetrics<f64>, spawn_score: f64) -> Self {
        Self {
            interdependency: metrics.interdependency,
            cyclomatic: metrics.cyclomatic,
            failure_cascade: metrics.failure_cascade,
            context_occupancy: metrics.context_occupancy,
            uncertainty: metrics.uncertainty,
            spawn_score,
        }
    }

    pub fn raw(&self) -> ComplexityMetrics<f64> {
        ComplexityMetrics::new([
            self.interdependency,
            self.cyclomatic,
            self.failure_cascade,
            self.context_occupancy,
            self.uncertainty,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnPackage {
    pub spawn_id: String,
    pub parent_id: String,
    /// Run-relative seconds at spawn time.
    pub timestamp: f64,
    pub memory: PackageMemory,
    pub skills: Vec<Skill>,
    pub context: ExecutionContext,
    pub task: TaskSpec,
    pub spawn_metrics: SpawnMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Decision,
    Edit,
    ToolCall,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Action {
    pub step: u64,
    pub kind: ActionKind,
    pub summary: String,
}

impl Action {
    pub fn new(step: u64, kind: ActionKind, summary: impl Into<String>) -> Self {
        Self {
            step,
            kind,
            summary: summary.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResumeStatus {
    Success,
    Failure,
    Partial,
}

impl ResumeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ResumeStatus::Success => "success",
            ResumeStatus::Failure => "failure",
            ResumeStatus::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChildResult {
    pub output: String,
    pub code_diff: Vec<Diff>,
    pub files_modified: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChildMetrics {
    pub tokens_used: u64,
    pub api_calls: u64,
    pub test_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumePackage {
    pub spawn_id: String,
    pub status: ResumeStatus,
    pub execution_time: f64,
    pub result: ChildResult,
    pub trace: Vec<Action>,
    pub skills_learned: Vec<Skill>,
    pub metrics: ChildMetrics,
}

/// Issues run-unique spawn ids.
#[derive(Debug, Clone, Default)]
pub struct SpawnIdSource {
    next: u64,
}

impl SpawnIdSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&mut self) -> String {
        self.next += 1;
        format!("spawn-{:04}", self.next)
    }

    pub fn issued(&self) -> u64 {
        self.next
    }
}

/// Assembles the snapshot handed to a child.
#[allow(clippy::too_many_arguments)]
pub fn build_spawn_package(
    ids: &mut SpawnIdSource,
    parent_id: &str,
    task: &TaskSpec,
    slice: &MemorySlice<f64>,
    skills: Vec<Skill>,
    context: ExecutionContext,
    metrics: &ComplexityMetrics<f64>,
    score: f64,
    clock: &dyn Clock,
) -> SpawnPackage {
    SpawnPackage {
        spawn_id: ids.next_id(),
        parent_id: parent_id.to_string(),
        timestamp: clock.now(),
        memory: PackageMemory::from_slice(slice),
        skills,
        context,
        task: task.clone(),
        spawn_metrics: SpawnMetrics::new(metrics, score),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{HashEmbedder, MemoryStore};
    use crate::runtime::VirtualClock;

    #[test]
    fn task_wire_carries_refs_in_constraints() {
        let t = TaskSpec::new("Fix parser")
            .with_constraint("keep API stable")
            .with_files(["src/parser.rs"])
            .with_symbols(["parse"]);
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(
            json["constraints"],
            serde_json::json!(["keep API stable", "touches file: src/parser.rs", "touches symbol: parse"])
        );
        assert_eq!(json.as_object().unwrap().len(), 3);
        let back: TaskSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn task_validation() {
        assert_eq!(TaskSpec::new("  ").validate(), Err(ProtocolError::EmptyDescription));
        let reserved = TaskSpec::new("x").with_constraint("touches file: a.rs");
        assert!(matches!(reserved.validate(), Err(ProtocolError::ReservedConstraint(_))));
    }

    #[test]
    fn build_assigns_unique_ids_and_groups_memory() {
        let emb = HashEmbedder::new(16);
        let mut store = MemoryStore::<f64>::new(16).with_step(2);
        store.insert(MemoryItem::new("w", Tier::Working, "cursor", 1, &emb)).unwrap();
        store.insert(MemoryItem::new("e", Tier::Episodic, "ran tests", 2, &emb)).unwrap();
        let slice = MemorySlice {
            items: store.items().to_vec(),
            source_store_step: 2,
            threshold_used: 0.5,
        };
        let clock = VirtualClock::new();
        clock.advance(12.5);
        let mut ids = SpawnIdSource::new();
        let task = TaskSpec::new("compress context");
        let m = ComplexityMetrics::new([1.0, 2.0, 3.0, 0.9, 0.5]);
        let a = build_spawn_package(&mut ids, "root", &task, &slice, vec![], ExecutionContext::new("/repo"), &m, 0.85, &clock);
        let b = build_spawn_package(
            &mut ids,
            "root",
            &task,
            &MemorySlice::empty(2, 0.5),
            vec![],
            ExecutionContext::new("/repo"),
            &m,
            0.85,
            &clock,
        );
        assert_ne!(a.spawn_id, b.spawn_id);
        assert_eq!(a.timestamp, 12.5);
        assert_eq!(a.memory.episodic.len(), 1);
        assert_eq!(a.memory.working.len(), 1);
        assert_eq!(a.spawn_metrics.spawn_score, 0.85);
        assert_eq!(a.spawn_metrics.raw(), m);
        assert!(b.memory.is_empty());
    }
}
