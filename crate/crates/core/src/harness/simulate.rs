use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coherence::{merge_results, Diff, Hunk, MergeStats, StochasticMergeBackend, Tier};
use crate::memory::fnv1a;
use crate::protocol::{ChildMetrics, ChildResult, Package, ResumePackage, ResumeStatus};
use crate::runtime::{run_parent_loop, ConfigError, ScriptedBackend};

use super::config::RunConfig;
use super::workload::{ConflictSpec, WorkloadError, WorkloadSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Outcome of a synthetic conflict batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConflictBatch {
    pub stats: MergeStats,
    /// Semantic merges that succeeded.
    pub semantic_successes: usize,
    /// Escalated hunks that still reached the merged output.
    pub silent_merges: usize,
    /// Line-disjoint scenarios that did not resolve automatically.
    pub disjoint_failures: usize,
    pub disjoint_scenarios: usize,
}

/// Runs `spec.count` two-child scenarios against one file each. A
/// `disjoint_fraction` share edit separate halves of the file; the rest
/// edit overlapping lines and go to the semantic backend.
pub fn simulate_conflicts(spec: &ConflictSpec, p_semantic: f64, seed: u64) -> ConflictBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backend = StochasticMergeBackend::new(p_semantic, rng.gen());
    let lines = spec.lines_per_file.max(8);
    let half = lines / 2;
    let mut batch = ConflictBatch::default();

    for i in 0..spec.count {
        let file = format!("src/conflict_{i:05}.rs");
        let base: Vec<String> = (1..=lines).map(|k| format!("line {k}")).collect();
        let disjoint = rng.gen_bool(spec.disjoint_fraction);
        let len_a = rng.gen_range(1..=3);
        let len_b = rng.gen_range(1..=3);
        let (a, b) = if disjoint {
            let lo = rng.gen_range(1..=half - 3);
            let hi = rng.gen_range(half + 1..=lines - 2);
            if rng.gen_bool(0.5) { (lo, hi) } else { (hi, lo) }
        } else {
            let a = rng.gen_range(1..=lines - 3);
            (a, rng.gen_range(a..a + len_a))
        };
        let left = edit(&file, &base, a, len_a, "left");
        let right = edit(&file, &base, b, len_b, "right");
        let base_files = BTreeMap::from([(file.clone(), base)]);
        let outcome = merge_results(&[resume(1, left), resume(2, right)], &base_files, &mut backend);

        if disjoint {
            batch.disjoint_scenarios += 1;
            let ok = outcome.resolutions.len() == 1
                && outcome.resolutions[0].tier == Tier::Auto
                && outcome.resolutions[0].success;
            if !ok {
                batch.disjoint_failures += 1;
            }
        }
        batch.semantic_successes += outcome
            .resolutions
            .iter()
            .filter(|r| r.tier == Tier::Semantic && r.success)
            .count();
        for esc in &outcome.escalations {
            let leaked = outcome
                .merged_diffs
                .iter()
                .filter(|d| d.file == esc.file)
                .flat_map(|d| &d.hunks)
                .any(|h| esc.left_hunks.contains(h) || esc.right_hunks.contains(h));
            if leaked {
                batch.silent_merges += 1;
            }
        }
        batch.stats.absorb(&outcome.stats);
    }
    batch
}

fn edit(file: &str, base: &[String], start: usize, len: usize, tag: &str) -> Diff {
    let len = len.min(base.len() + 1 - start);
    let old: Vec<String> = base[start - 1..start - 1 + len].to_vec();
    let new: Vec<String> = old.iter().map(|l| format!("{l} ({tag})")).collect();
    Diff::new(file, vec![Hunk::new(start, old, new)])
}

fn resume(n: u32, diff: Diff) -> ResumePackage {
    ResumePackage {
        spawn_id: format!("spawn-{n:04}"),
        status: ResumeStatus::Success,
        execution_time: 1.0,
        result: ChildResult {
            output: String::new(),
            files_modified: vec![diff.file.clone()],
            code_diff: vec![diff],
        },
        trace: Vec::new(),
        skills_learned: Vec::new(),
        metrics: ChildMetrics {
            tokens_used: 0,
            api_calls: 0,
            test_pass_rate: 1.0,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpawnLine {
    pub spawn_id: String,
    pub parent_id: String,
    pub depth: u32,
    pub specialization: String,
    pub score: f64,
    pub outcome: String,
    pub started_at: Option<f64>,
    pub ended_at: Option<f64>,
    pub parent_tokens: usize,
    pub slice_tokens: usize,
    pub tokens_used: u64,
    pub api_calls: u64,
}

/// Everything a run measured, ready for [`emit_report`](super::emit_report).
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub workload: String,
    pub seed: u64,
    pub completed: bool,
    pub root_steps: u64,
    pub end_time: f64,
    pub spawns_requested: usize,
    pub spawns_started: usize,
    pub spawns_queued: usize,
    pub spawns_rejected: usize,
    pub spawns_timed_out: usize,
    pub spawns_failed: usize,
    pub successes: usize,
    pub blocked: BTreeMap<String, usize>,
    pub tree_nodes: usize,
    pub tree_depth: u32,
    pub tree_shape: Vec<usize>,
    pub violations: usize,
    pub avg_memory: Option<f64>,
    pub avg_sliced: Option<f64>,
    pub reduction: Option<f64>,
    pub runtime_merge: MergeStats,
    pub batch: Option<ConflictBatch>,
    pub escalations: usize,
    pub followups_resolved: usize,
    pub dropped_hunks: usize,
    pub total_tokens: u64,
    pub total_calls: u64,
    pub total_cost: f64,
    pub cost_per_success: Option<f64>,
    pub episodic_items: usize,
    pub event_count: usize,
    pub event_digest: u64,
    pub event_log: String,
    pub spawns: Vec<SpawnLine>,
    /// Spawn and resume packages in event order.
    pub packages: Vec<Package>,
}

impl RunReport {
    /// Runtime and batch conflicts together.
    pub fn merge_totals(&self) -> MergeStats {
        let mut m = self.runtime_merge;
        if let Some(b) = &self.batch {
            m.absorb(&b.stats);
        }
        m
    }
}

/// Runs a workload with scripted children and a seeded semantic merge
/// backend, then runs its conflict batch if it has one.
pub fn run_simulation(spec: &WorkloadSpec, config: &RunConfig, seed: u64) -> Result<RunReport, SimulationError> {
    spec.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let runtime_seed: u64 = seeds.gen();
    let merge_seed: u64 = seeds.gen();
    let batch_seed: u64 = seeds.gen();

    let policy = config.policy();
    let runtime = config.runtime(runtime_seed);
    let mut backend = ScriptedBackend::new(spec.children.clone());
    let mut merger = StochasticMergeBackend::new(spec.p_semantic, merge_seed);
    let outcome = run_parent_loop(
        &spec.task_spec(),
        spec.initial_state(policy.inherit_threshold),
        spec.trajectory.clone(),
        &policy,
        &runtime,
        &mut backend,
        &mut merger,
    )?;
    let batch = spec
        .conflicts
        .as_ref()
        .map(|c| simulate_conflicts(c, spec.p_semantic, batch_seed));

    let count = |o: &str| outcome.spawns.iter().filter(|s| s.outcome == o).count();
    let started: Vec<_> = outcome.spawns.iter().filter(|s| s.started_at.is_some()).collect();
    let successes = count("success") + count("partial");
    let (avg_memory, avg_sliced, reduction) = if started.is_empty() {
        (None, None, None)
    } else {
        let n = started.len() as f64;
        let parent: usize = started.iter().map(|s| s.parent_tokens).sum();
        let sliced: usize = started.iter().map(|s| s.slice_tokens).sum();
        (
            Some(parent as f64 / n),
            Some(sliced as f64 / n),
            Some(crate::memory::reduction_ratio(parent, sliced)),
        )
    };
    let total_tokens: u64 = outcome.spawns.iter().map(|s| s.tokens_used).sum();
    let total_calls: u64 = outcome.spawns.iter().map(|s| s.api_calls).sum();
    let total_cost =
        total_tokens as f64 / 1000.0 * config.cost.price_per_1k_tokens + total_calls as f64 * config.cost.price_per_call;
    let event_log = outcome.event_log();

    Ok(RunReport {
        workload: spec.name.clone(),
        seed,
        completed: outcome.completed,
        root_steps: outcome.root_steps,
        end_time: outcome.end_time,
        spawns_requested: outcome.spawns.len(),
        spawns_started: started.len(),
        spawns_queued: outcome.spawns.iter().filter(|s| s.queued).count(),
        spawns_rejected: count("rejected"),
        spawns_timed_out: count("timed_out"),
        spawns_failed: count("failure") + count("invalid") + count("backend_failed"),
        successes,
        blocked: outcome.blocked.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        tree_nodes: outcome.tree.len(),
        tree_depth: outcome.tree.max_depth_reached(),
        tree_shape: outcome.tree.shape(),
        violations: outcome.violations.len(),
        avg_memory,
        avg_sliced,
        reduction,
        runtime_merge: outcome.merge,
        batch,
        escalations: outcome.escalations,
        followups_resolved: outcome.followups_resolved,
        dropped_hunks: outcome.dropped_hunks,
        total_tokens,
        total_calls,
        total_cost,
        cost_per_success: (successes > 0).then(|| total_cost / successes as f64),
        episodic_items: outcome.final_state.episodic_len(),
        event_count: outcome.events.len(),
        event_digest: fnv1a(event_log.as_bytes()),
        event_log,
        spawns: outcome
            .spawns
            .iter()
            .map(|s| SpawnLine {
                spawn_id: s.spawn_id.clone(),
                parent_id: s.parent_id.clone(),
                depth: s.depth,
                specialization: s.specialization.as_str().to_string(),
                score: s.score,
                outcome: s.outcome.clone(),
                started_at: s.started_at,
                ended_at: s.ended_at,
                parent_tokens: s.parent_tokens,
                slice_tokens: s.slice_tokens,
                tokens_used: s.tokens_used,
                api_calls: s.api_calls,
            })
            .collect(),
        packages: outcome.packages,
    })
}
