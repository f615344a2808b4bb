//! Diffs and the coherence protocol for concurrently running children.
//!
//! Children work on snapshots and return line-level diffs against the same
//! base. When their file sets intersect, each conflicting pair is resolved
//! by one of three tiers: automatic union when the hunks are line-disjoint,
//! a backend-proposed semantic merge that must validate against the base,
//! or escalation back to the parent.

mod diff;
mod merge;

pub use diff::{apply_diff, diff_lines, format_unified, parse_unified, ApplyError, Diff, Hunk, ParseDiffError};
pub use merge::{
    auto_merge, detect_conflicts, file_overlap, line_disjoint, merge_results, prefer_left_union, semantic_merge,
    touched_files, ConflictPair, DropReason, DroppedHunk, Escalation, MergeBackend, MergeBackendError, MergeError,
    MergeOutcome, MergeStats, Resolution, SemanticOutcome, StochasticMergeBackend, Tier, DEFAULT_SEMANTIC_P,
};
