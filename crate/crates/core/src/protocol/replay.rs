use crate::coherence::{apply_diff, ApplyError, Diff};
use crate::memory::{Embedder, MemoryError, MemoryItem, Tier};
use crate::runtime::AgentState;
use crate::skills::{PromotionReport, Provenance, Skill, DEFAULT_PROMOTE_THRESHOLD};

use super::{summarize_trace, Action, ProtocolError, ResumePackage, ResumeStatus, TraceSummarizer};

/// What to do with a child's diffs during replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffStaging {
    /// Apply straight to the parent's files (single child).
    #[default]
    ApplyDirect,
    /// Hand the diffs back so concurrent results can be merged first.
    Defer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub promote_threshold: f64,
    pub staging: DiffStaging,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            promote_threshold: DEFAULT_PROMOTE_THRESHOLD,
            staging: DiffStaging::ApplyDirect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayReport {
    pub summarized: Vec<Action>,
    pub summary_error: Option<ProtocolError>,
    pub episodic_added: usize,
    pub memory_errors: Vec<MemoryError>,
    pub promotion: Option<PromotionReport>,
    pub diffs_applied: usize,
    /// Diffs returned to the caller under [`DiffStaging::Defer`].
    pub staged: Vec<Diff>,
    pub diff_failures: Vec<(String, ApplyError)>,
}

/// Folds a validated child result into the parent: summarize the trace,
/// record it and the output as episodic memory, promote learned skills,
/// then stage or apply the diffs. Failed children stop after memory.
/// Partial children only contribute diffs that apply cleanly.
pub fn replay_resume(
    state: &mut AgentState,
    resume: &ResumePackage,
    config: &ReplayConfig,
    summarizer: &dyn TraceSummarizer,
    embedder: &dyn Embedder<f64>,
) -> ReplayReport {
    let mut report = ReplayReport::default();

    match summarize_trace(&resume.trace, summarizer) {
        Ok(s) => report.summarized = s,
        Err(e) => report.summary_error = Some(e),
    }

    let step = state.memory.current_step();
    let files: Vec<String> = resume.result.files_modified.clone();
    let mut items: Vec<MemoryItem<f64>> = report
        .summarized
        .iter()
        .map(|a| {
            let text = format!("{} {:?}: {}", resume.spawn_id, a.kind, a.summary);
            MemoryItem::new(format!("{}:trace:{}", resume.spawn_id, a.step), Tier::Episodic, text, step, embedder)
        })
        .collect();
    let output = format!("{} {}: {}", resume.spawn_id, resume.status.as_str(), resume.result.output);
    items.push(
        MemoryItem::new(format!("{}:output", resume.spawn_id), Tier::Episodic, output, step, embedder).with_files(files),
    );
    for item in items {
        match state.memory.insert(item) {
            Ok(()) => report.episodic_added += 1,
            Err(e) => report.memory_errors.push(e),
        }
    }

    if resume.status == ResumeStatus::Failure {
        return report;
    }

    let learned: Vec<Skill> = resume
        .skills_learned
        .iter()
        .map(|s| Skill {
            provenance: Provenance::Learned,
            success_stat: s.success_stat.or(Some(resume.metrics.test_pass_rate)),
            ..s.clone()
        })
        .collect();
    report.promotion = Some(state.skills.promote(&learned, config.promote_threshold));

    for diff in &resume.result.code_diff {
        let base = state.files.get(&diff.file).cloned().unwrap_or_default();
        match apply_diff(&base, diff) {
            Ok(updated) => match config.staging {
                DiffStaging::ApplyDirect => {
                    state.files.insert(diff.file.clone(), updated);
                    report.diffs_applied += 1;
                }
                DiffStaging::Defer => report.staged.push(diff.clone()),
            },
            Err(e) => report.diff_failures.push((diff.file.clone(), e)),
        }
    }
    report
}
