//! Hierarchical agent spawning runtime.
//!
//! A parent agent watches five complexity metrics and, when their weighted
//! score crosses the spawn threshold, hands a specialized child a relevance
//! sliced copy of its memory plus the skills that fit the child's task.
//! Children return structured results that the parent replays into its own
//! memory, skill library and files, merging concurrent edits through a
//! three-tier coherence protocol.
//!
//! Scoring code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what packages and reports use.
//! Everything model-dependent sits behind a trait ([`memory::Embedder`],
//! [`coherence::MergeBackend`], [`runtime::ChildBackend`],
//! [`protocol::TraceSummarizer`]) with a deterministic default, and the
//! [`harness`] drives whole runs from workload files.

pub mod coherence;
pub mod harness;
pub mod memory;
pub mod policy;
pub mod protocol;
pub mod runtime;
pub mod scalar;
pub mod skills;

pub use scalar::Scalar;

pub type MemoryItem = memory::MemoryItem<f64>;
pub type MemoryStore = memory::MemoryStore<f64>;
pub type MemorySlice = memory::MemorySlice<f64>;
pub type RelevanceWeights = memory::RelevanceWeights<f64>;
pub type ComplexityMetrics = policy::ComplexityMetrics<f64>;
pub type CalibrationState = policy::CalibrationState<f64>;
pub type SpawnPolicyConfig = policy::SpawnPolicyConfig<f64>;
pub type SpawnDecision = policy::SpawnDecision<f64>;
