use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coherence::{apply_diff, diff_lines, merge_results, Diff, Escalation, MergeBackend, MergeStats};
use crate::memory::{slice_memory, HashEmbedder, MemoryStore};
use crate::policy::{decide_spawn, update_calibration, CalibrationState, ComplexityMetrics, Gate, RuntimeState, Specialization};
use crate::protocol::{
    build_spawn_package, replay_resume, validate_resume, ChildResult, DiffStaging, ExecutionContext,
    KeyDecisionSummarizer, Package, ReplayConfig, ResumePackage, ResumeStatus, SpawnIdSource, SpawnPackage, TaskSpec,
    ValidationIssue,
};
use crate::skills::SkillLibrary;

use super::backend::{BackendError, ChildBackend};
use super::tree::{AgentId, NodeStatus, SpawnTree, TreeViolation};
use super::{join_issues, AgentPolicy, AgentState, Clock, ConfigError, ParentMode, RuntimeConfig};

fn one() -> u32 {
    1
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

/// One observation of an agent's metric trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    pub metrics: ComplexityMetrics<f64>,
    /// Spawn requests issued if this step decides to spawn.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub parallel: u32,
}

impl TrajectoryStep {
    pub fn new(values: [f64; 5]) -> Self {
        Self {
            metrics: ComplexityMetrics::new(values),
            parallel: 1,
        }
    }

    pub fn with_parallel(mut self, n: u32) -> Self {
        self.parallel = n;
        self
    }
}

/// A child waiting to start.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnRequest {
    pub package: SpawnPackage,
    pub specialization: Specialization,
    pub requested_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChildHandle {
    pub agent: AgentId,
    pub parent: String,
    pub request: SpawnRequest,
    pub started_at: f64,
    pub deadline: f64,
}

impl ChildHandle {
    pub fn spawn_id(&self) -> &str {
        &self.request.package.spawn_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpawnVerdict {
    Started(ChildHandle),
    Queued,
    Rejected(String),
}

/// Admits a spawn request: rejected at the depth limit, queued FIFO at the
/// concurrency limit, otherwise registered in the tree as running.
pub fn spawn_child(
    parent: &AgentId,
    request: SpawnRequest,
    tree: &mut SpawnTree,
    queue: &mut VecDeque<SpawnRequest>,
    config: &RuntimeConfig,
    now: f64,
) -> SpawnVerdict {
    if parent.depth >= config.max_depth {
        return SpawnVerdict::Rejected(format!(
            "depth limit: child would sit at depth {} > {}",
            parent.depth + 1,
            config.max_depth
        ));
    }
    if !queue.is_empty() || tree.running_children(&parent.id) >= config.concurrent_limit {
        queue.push_back(request);
        return SpawnVerdict::Queued;
    }
    start_request(parent, request, tree, config, now)
}

fn start_request(
    parent: &AgentId,
    request: SpawnRequest,
    tree: &mut SpawnTree,
    config: &RuntimeConfig,
    now: f64,
) -> SpawnVerdict {
    let agent = AgentId {
        id: request.package.spawn_id.clone(),
        depth: parent.depth + 1,
    };
    match tree.add_child(&parent.id, agent.clone(), Some(request.specialization), now) {
        Ok(()) => SpawnVerdict::Started(ChildHandle {
            agent,
            parent: parent.id.clone(),
            request,
            started_at: now,
            deadline: now + config.child_timeout,
        }),
        Err(v) => SpawnVerdict::Rejected(v.to_string()),
    }
}

/// How a child ended, from the parent's point of view.
#[derive(Debug, Clone, PartialEq)]
pub enum ChildOutcome {
    Returned(ResumePackage),
    TimedOut { after: f64 },
    Invalid(Vec<ValidationIssue>),
    BackendFailed(String),
}

impl ChildOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            ChildOutcome::Returned(r) => r.status.as_str(),
            ChildOutcome::TimedOut { .. } => "timed_out",
            ChildOutcome::Invalid(_) => "invalid",
            ChildOutcome::BackendFailed(_) => "backend_failed",
        }
    }

    fn node_status(&self) -> NodeStatus {
        match self {
            ChildOutcome::Returned(r) if r.status != ResumeStatus::Failure => NodeStatus::Done,
            ChildOutcome::TimedOut { .. } => NodeStatus::TimedOut,
            _ => NodeStatus::Failed,
        }
    }
}

fn classify(handle: &ChildHandle, result: Result<ResumePackage, BackendError>, timeout: f64) -> (f64, ChildOutcome) {
    match result {
        Err(e) => (handle.started_at, ChildOutcome::BackendFailed(e.to_string())),
        Ok(r) if r.execution_time > timeout => (handle.deadline, ChildOutcome::TimedOut { after: timeout }),
        Ok(r) => {
            let end = handle.started_at + r.execution_time;
            match validate_resume(&r, &handle.request.package) {
                Ok(()) => (end, ChildOutcome::Returned(r)),
                Err(issues) => (end, ChildOutcome::Invalid(issues)),
            }
        }
    }
}

/// Joins leaf children on a virtual clock: each returns at its start plus
/// its reported execution time, or is marked timed out at its deadline.
/// Results come back in completion order and the clock ends at the last one.
pub fn await_children(
    children: Vec<(ChildHandle, Result<ResumePackage, BackendError>)>,
    config: &RuntimeConfig,
    clock: &super::VirtualClock,
) -> Vec<(ChildHandle, ChildOutcome)> {
    let mut done: Vec<(f64, usize, ChildHandle, ChildOutcome)> = children
        .into_iter()
        .enumerate()
        .map(|(i, (h, r))| {
            let (t, o) = classify(&h, r, config.child_timeout);
            (t, i, h, o)
        })
        .collect();
    done.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (t, ..) in &done {
        clock.advance_to(*t);
    }
    done.into_iter().map(|(_, _, h, o)| (h, o)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureKind {
    TimedOut { spawn_id: String, after: f64 },
    Invalid { spawn_id: String, issues: Vec<ValidationIssue> },
    Backend { spawn_id: String, message: String },
}

impl FailureKind {
    pub fn spawn_id(&self) -> &str {
        match self {
            FailureKind::TimedOut { spawn_id, .. }
            | FailureKind::Invalid { spawn_id, .. }
            | FailureKind::Backend { spawn_id, .. } => spawn_id,
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureKind::TimedOut { spawn_id, after } => write!(f, "child {spawn_id} timed out after {after} s"),
            FailureKind::Invalid { spawn_id, issues } => {
                write!(f, "child {spawn_id} returned an invalid result: {}", join_issues(issues))
            }
            FailureKind::Backend { spawn_id, message } => write!(f, "child {spawn_id} backend failure: {message}"),
        }
    }
}

/// Records a failed child as one episodic item. Nothing else changes and
/// nothing is retried.
pub fn handle_child_failure(state: &mut AgentState, failure: &FailureKind, embedder: &HashEmbedder) {
    state.note(&format!("{}:failure", failure.spawn_id()), &failure.to_string(), embedder);
}

/// One line of the run's event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub agent: String,
    pub kind: &'static str,
    pub detail: String,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} {} {}", self.time, self.agent, self.kind)?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

/// Lifecycle of one spawn request.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnRecord {
    pub spawn_id: String,
    pub parent_id: String,
    pub depth: u32,
    pub specialization: Specialization,
    pub score: f64,
    pub requested_at: f64,
    pub queued: bool,
    pub started_at: Option<f64>,
    pub ended_at: Option<f64>,
    pub parent_tokens: usize,
    pub slice_tokens: usize,
    /// requested, running, success, partial, failure, timed_out, invalid,
    /// backend_failed, rejected or cancelled.
    pub outcome: String,
    pub reason: Option<String>,
    pub tokens_used: u64,
    pub api_calls: u64,
    pub execution_time: f64,
    pub test_pass_rate: Option<f64>,
}

impl SpawnRecord {
    pub fn reduction(&self) -> f64 {
        crate::memory::reduction_ratio(self.parent_tokens, self.slice_tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub completed: bool,
    pub tree: SpawnTree,
    pub events: Vec<Event>,
    pub spawns: Vec<SpawnRecord>,
    pub merge: MergeStats,
    pub escalations: usize,
    /// Escalations the parent later resolved as follow-up subtasks.
    pub followups_resolved: usize,
    pub dropped_hunks: usize,
    /// Spawn decisions suppressed by a gate other than the score threshold.
    pub blocked: BTreeMap<&'static str, usize>,
    /// Refused tree mutations plus anything the final audit finds.
    pub violations: Vec<TreeViolation>,
    /// Every spawn package built and every resume package accepted, in
    /// event order.
    pub packages: Vec<Package>,
    pub final_state: AgentState,
    pub root_steps: u64,
    pub end_time: f64,
}

impl RunOutcome {
    pub fn event_log(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }
}

fn gate_name(g: Gate) -> &'static str {
    match g {
        Gate::BelowThreshold => "below_threshold",
        Gate::DepthLimit => "depth_limit",
        Gate::ConcurrencyLimit => "concurrency_limit",
        Gate::Cooldown => "cooldown",
    }
}

struct FixedClock(f64);

impl Clock for FixedClock {
    fn now(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Step,
    WorkDone,
    Timeout,
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    kind: Kind,
    agent: usize,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct ChildInfo {
    request: SpawnRequest,
    result: Result<ResumePackage, BackendError>,
    snapshot: BTreeMap<String, Vec<String>>,
    started_at: f64,
    nested: bool,
    files_changed: bool,
    work_done: bool,
}

struct Agent {
    id: AgentId,
    parent: Option<usize>,
    task: TaskSpec,
    state: AgentState,
    trajectory: VecDeque<TrajectoryStep>,
    calibration: CalibrationState<f64>,
    since_spawn: Option<u64>,
    steps: u64,
    running: Vec<usize>,
    queue: VecDeque<SpawnRequest>,
    batch: Vec<ResumePackage>,
    /// Escalated conflicts the agent resolves itself, one per step.
    followups: VecDeque<Escalation>,
    waiting: bool,
    trajectory_done: bool,
    finished: bool,
    child: Option<ChildInfo>,
}

impl Agent {
    fn new(id: AgentId, parent: Option<usize>, task: TaskSpec, state: AgentState, trajectory: Vec<TrajectoryStep>) -> Self {
        Self {
            id,
            parent,
            task,
            state,
            trajectory_done: trajectory.is_empty(),
            trajectory: trajectory.into(),
            calibration: CalibrationState::default(),
            since_spawn: None,
            steps: 0,
            running: Vec::new(),
            queue: VecDeque::new(),
            batch: Vec::new(),
            followups: VecDeque::new(),
            waiting: false,
            finished: false,
            child: None,
        }
    }
}

struct Engine<'a> {
    policy: &'a AgentPolicy,
    config: &'a RuntimeConfig,
    backend: &'a mut dyn ChildBackend,
    merger: &'a mut dyn MergeBackend,
    embedder: HashEmbedder,
    rng: ChaCha8Rng,
    ids: SpawnIdSource,
    agents: Vec<Agent>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    tree: SpawnTree,
    events: Vec<Event>,
    spawns: Vec<SpawnRecord>,
    record_of: BTreeMap<String, usize>,
    merge: MergeStats,
    escalations: usize,
    followups_resolved: usize,
    dropped_hunks: usize,
    blocked: BTreeMap<&'static str, usize>,
    violations: Vec<TreeViolation>,
    packages: Vec<Package>,
}

/// Child task derived from the parent's: same description and references,
/// with the specialization as the expected outcome.
pub fn child_task(parent: &TaskSpec, specialization: Specialization) -> TaskSpec {
    TaskSpec {
        description: parent.description.clone(),
        constraints: parent.constraints.clone(),
        expected_outcome: specialization.title().to_string(),
        referenced_files: parent.referenced_files.clone(),
        referenced_symbols: parent.referenced_symbols.clone(),
    }
}

/// Runs a root agent over its metric trajectory until it and every
/// descendant have finished. Deterministic for fixed inputs and seed.
pub fn run_parent_loop(
    task: &TaskSpec,
    state: AgentState,
    trajectory: Vec<TrajectoryStep>,
    policy: &AgentPolicy,
    config: &RuntimeConfig,
    backend: &mut dyn ChildBackend,
    merger: &mut dyn MergeBackend,
) -> Result<RunOutcome, ConfigError> {
    config.validate()?;
    policy.validate()?;
    task.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    for step in &trajectory {
        step.metrics.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    let root = AgentId::root("root");
    let mut engine = Engine {
        policy,
        config,
        backend,
        merger,
        embedder: HashEmbedder::new(state.memory.embedding_dim()),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        ids: SpawnIdSource::new(),
        agents: vec![Agent::new(root.clone(), None, task.clone(), state, trajectory)],
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        tree: SpawnTree::new(root, config.max_depth, config.concurrent_limit, 0.0),
        events: Vec::new(),
        spawns: Vec::new(),
        record_of: BTreeMap::new(),
        merge: MergeStats::default(),
        escalations: 0,
        followups_resolved: 0,
        dropped_hunks: 0,
        packages: Vec::new(),
        blocked: BTreeMap::new(),
        violations: Vec::new(),
    };
    engine.schedule(0.0, Kind::Step, 0);
    while let Some(ev) = engine.heap.pop() {
        // Deadlines and completions of agents that already ended must not
        // move the clock.
        if ev.kind != Kind::Step && engine.agents[ev.agent].finished {
            continue;
        }
        engine.now = ev.time;
        match ev.kind {
            Kind::Step => engine.step(ev.agent),
            Kind::WorkDone => engine.work_done(ev.agent),
            Kind::Timeout => engine.timeout(ev.agent),
        }
    }
    // A root with no steps at all still finishes.
    engine.try_finish(0);
    Ok(engine.into_outcome())
}

impl Engine<'_> {
    fn schedule(&mut self, time: f64, kind: Kind, agent: usize) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            seq: self.seq,
            kind,
            agent,
        });
    }

    fn log(&mut self, agent: usize, kind: &'static str, detail: String) {
        self.events.push(Event {
            time: self.now,
            agent: self.agents[agent].id.id.clone(),
            kind,
            detail,
        });
    }

    fn record(&mut self, spawn_id: &str) -> &mut SpawnRecord {
        let i = self.record_of[spawn_id];
        &mut self.spawns[i]
    }

    fn step(&mut self, a: usize) {
        if self.agents[a].finished {
            return;
        }
        if let Some(esc) = self.agents[a].followups.pop_front() {
            self.followup(a, esc);
            self.agents[a].state.memory.advance_step();
            self.schedule(self.now + self.config.step_duration, Kind::Step, a);
            return;
        }
        let Some(step) = self.agents[a].trajectory.pop_front() else {
            self.agents[a].trajectory_done = true;
            self.log(a, "trajectory_end", String::new());
            self.try_finish(a);
            return;
        };
        let agent = &mut self.agents[a];
        agent.steps += 1;
        agent.calibration = update_calibration(&agent.calibration, &step.metrics);
        let runtime = RuntimeState {
            depth: agent.id.depth,
            active_children: agent.running.len(),
            steps_since_last_spawn: agent.since_spawn,
        };
        let decision = decide_spawn(&step.metrics, &agent.calibration, &self.policy.spawn, &runtime);
        let n = agent.steps;
        self.log(a, "step", format!("n={n} score={:.6}", decision.score));

        match (decision.specialization, decision.blocked_by) {
            (Some(spec), None) => {
                self.agents[a].since_spawn = Some(0);
                for _ in 0..step.parallel {
                    self.request(a, spec, decision.score, &step.metrics);
                }
            }
            (_, blocked) => {
                if let Some(g) = blocked.filter(|g| *g != Gate::BelowThreshold) {
                    *self.blocked.entry(gate_name(g)).or_default() += 1;
                    self.log(a, "spawn_blocked", gate_name(g).to_string());
                }
                let agent = &mut self.agents[a];
                agent.since_spawn = agent.since_spawn.map(|s| s + 1);
            }
        }

        let agent = &mut self.agents[a];
        agent.state.memory.advance_step();
        if self.config.parent_mode == ParentMode::Pause && !(agent.running.is_empty() && agent.queue.is_empty()) {
            agent.waiting = true;
        } else {
            self.schedule(self.now + self.config.step_duration, Kind::Step, a);
        }
    }

    fn request(&mut self, a: usize, spec: Specialization, score: f64, metrics: &ComplexityMetrics<f64>) {
        let agent = &self.agents[a];
        let task = child_task(&agent.task, spec);
        let slice = match slice_memory(
            &agent.state.memory,
            &task,
            self.policy.relevance_threshold,
            &self.policy.relevance,
            &self.embedder,
        ) {
            Ok(s) => s,
            Err(e) => {
                self.log(a, "spawn_error", e.to_string());
                return;
            }
        };
        let skills = agent.state.skills.select_inherited::<f64>(&task, &self.embedder);
        let mut context = ExecutionContext::new(".");
        context.current_file = task.referenced_files.iter().next().cloned().unwrap_or_default();
        let parent_tokens = agent.state.memory.token_count();
        let package = build_spawn_package(
            &mut self.ids,
            &agent.id.id,
            &task,
            &slice,
            skills,
            context,
            metrics,
            score,
            &FixedClock(self.now),
        );
        self.packages.push(Package::Spawn(package.clone()));
        let spawn_id = package.spawn_id.clone();
        self.record_of.insert(spawn_id.clone(), self.spawns.len());
        self.spawns.push(SpawnRecord {
            spawn_id: spawn_id.clone(),
            parent_id: agent.id.id.clone(),
            depth: agent.id.depth + 1,
            specialization: spec,
            score,
            requested_at: self.now,
            queued: false,
            started_at: None,
            ended_at: None,
            parent_tokens,
            slice_tokens: slice.token_count(),
            outcome: "requested".into(),
            reason: None,
            tokens_used: 0,
            api_calls: 0,
            execution_time: 0.0,
            test_pass_rate: None,
        });
        self.log(
            a,
            "spawn_request",
            format!(
                "{spawn_id} {spec} tokens={parent_tokens}->{} items={}",
                slice.token_count(),
                slice.len()
            ),
        );
        let request = SpawnRequest {
            package,
            specialization: spec,
            requested_at: self.now,
        };
        let agent = &mut self.agents[a];
        let verdict = spawn_child(&agent.id, request, &mut self.tree, &mut agent.queue, self.config, self.now);
        self.settle(a, &spawn_id, verdict);
    }

    fn settle(&mut self, a: usize, spawn_id: &str, verdict: SpawnVerdict) {
        match verdict {
            SpawnVerdict::Started(handle) => self.launch(a, handle),
            SpawnVerdict::Queued => {
                self.record(spawn_id).queued = true;
                self.log(a, "spawn_queued", spawn_id.to_string());
            }
            SpawnVerdict::Rejected(reason) => {
                if reason.contains("running children") || reason.contains("exceeds the limit") {
                    // The tree refused a mutation the admission checks let through.
                    self.violations.push(TreeViolation::NotRunning(reason.clone()));
                }
                let r = self.record(spawn_id);
                r.outcome = "rejected".into();
                r.reason = Some(reason.clone());
                self.log(a, "spawn_rejected", format!("{spawn_id} {reason}"));
            }
        }
    }

    fn launch(&mut self, a: usize, handle: ChildHandle) {
        let seed: u64 = self.rng.gen();
        let package = &handle.request.package;
        let spec = handle.request.specialization;
        let result = self.backend.run(package, spec, seed);
        let trajectory = if result.is_ok() {
            self.backend.nested_trajectory(package, spec, seed)
        } else {
            Vec::new()
        };

        let parent = &self.agents[a];
        let dim = parent.state.memory.embedding_dim();
        let mut memory = MemoryStore::new(dim).with_step(parent.state.memory.current_step());
        for item in package.memory.items() {
            memory.insert(item.clone()).expect("slice items come from a valid store");
        }
        let mut skills = SkillLibrary::new(self.policy.inherit_threshold);
        for s in &package.skills {
            let _ = skills.add(s.clone());
        }
        let mut state = AgentState::new(memory, skills);
        state.files = parent.state.files.clone();

        let c = self.agents.len();
        let nested = !trajectory.is_empty();
        let mut agent = Agent::new(handle.agent.clone(), Some(a), package.task.clone(), state, trajectory);
        let spawn_id = package.spawn_id.clone();
        let work_time = match &result {
            Ok(r) if r.execution_time <= self.config.child_timeout => Some(handle.started_at + r.execution_time),
            Ok(_) => None,
            Err(_) => Some(handle.started_at),
        };
        agent.child = Some(ChildInfo {
            snapshot: agent.state.files.clone(),
            request: handle.request,
            result,
            started_at: handle.started_at,
            nested,
            files_changed: false,
            work_done: false,
        });
        self.agents.push(agent);
        self.agents[a].running.push(c);

        let r = self.record(&spawn_id);
        r.started_at = Some(handle.started_at);
        r.outcome = "running".into();
        self.log(a, "child_start", format!("{spawn_id} depth={} seed={seed}", handle.agent.depth));

        if let Some(t) = work_time {
            self.schedule(t, Kind::WorkDone, c);
        }
        self.schedule(handle.deadline, Kind::Timeout, c);
        if nested {
            self.schedule(self.now, Kind::Step, c);
        }
    }

    fn work_done(&mut self, c: usize) {
        if self.agents[c].finished {
            return;
        }
        if let Some(info) = self.agents[c].child.as_mut() {
            info.work_done = true;
        }
        self.try_finish(c);
    }

    /// Resolves an escalated conflict by hand: the left child's hunks win
    /// when they still apply to the current files.
    fn followup(&mut self, a: usize, esc: Escalation) {
        let files = &mut self.agents[a].state.files;
        let base = files.get(&esc.file).cloned().unwrap_or_default();
        let diff = Diff::new(esc.file.clone(), esc.left_hunks.clone());
        let detail = format!("{}+{} {}", esc.pair.left_child, esc.pair.right_child, esc.file);
        match apply_diff(&base, &diff) {
            Ok(updated) => {
                files.insert(esc.file.clone(), updated);
                if let Some(info) = self.agents[a].child.as_mut() {
                    info.files_changed = true;
                }
                self.followups_resolved += 1;
                self.log(a, "followup_resolved", detail);
            }
            Err(e) => self.log(a, "followup_failed", format!("{detail}: {e}")),
        }
    }

    fn try_finish(&mut self, a: usize) {
        let agent = &self.agents[a];
        let idle = agent.trajectory_done && agent.running.is_empty() && agent.queue.is_empty() && agent.followups.is_empty();
        if agent.finished || !idle || agent.child.as_ref().is_some_and(|c| !c.work_done) {
            return;
        }
        if agent.child.is_none() {
            self.agents[a].finished = true;
            let id = self.agents[a].id.id.clone();
            if let Err(v) = self.tree.finish(&id, NodeStatus::Done, self.now) {
                self.violations.push(v);
            }
            self.log(a, "done", String::new());
            return;
        }
        self.agents[a].finished = true;
        let outcome = self.child_outcome(a);
        self.deliver(a, outcome);
    }

    fn child_outcome(&mut self, c: usize) -> ChildOutcome {
        let agent = &self.agents[c];
        let info = agent.child.as_ref().expect("child agent");
        let mut resume = match &info.result {
            Err(e) => return ChildOutcome::BackendFailed(e.to_string()),
            Ok(r) => r.clone(),
        };
        if info.nested {
            resume.execution_time = self.now - info.started_at;
        }
        if info.files_changed {
            let mut files = agent.state.files.clone();
            for d in &resume.result.code_diff {
                let base = files.get(&d.file).cloned().unwrap_or_default();
                if let Ok(updated) = apply_diff(&base, d) {
                    files.insert(d.file.clone(), updated);
                }
            }
            let diffs: Vec<_> = files
                .iter()
                .filter(|(f, lines)| info.snapshot.get(*f) != Some(*lines))
                .map(|(f, lines)| {
                    let old = info.snapshot.get(f).cloned().unwrap_or_default();
                    diff_lines(f, &old, lines)
                })
                .collect();
            resume.result = ChildResult {
                files_modified: diffs.iter().map(|d| d.file.clone()).collect(),
                code_diff: diffs,
                output: resume.result.output,
            };
        }
        match validate_resume(&resume, &info.request.package) {
            Ok(()) => ChildOutcome::Returned(resume),
            Err(issues) => ChildOutcome::Invalid(issues),
        }
    }

    fn timeout(&mut self, c: usize) {
        if self.agents[c].finished {
            return;
        }
        self.cancel_descendants(c);
        self.agents[c].finished = true;
        let after = self.config.child_timeout;
        self.deliver(c, ChildOutcome::TimedOut { after });
    }

    fn cancel_descendants(&mut self, c: usize) {
        let running = std::mem::take(&mut self.agents[c].running);
        for d in running {
            self.cancel_descendants(d);
            self.agents[d].finished = true;
            let id = self.agents[d].id.id.clone();
            if let Err(v) = self.tree.finish(&id, NodeStatus::TimedOut, self.now) {
                self.violations.push(v);
            }
            let now = self.now;
            let r = self.record(&id);
            r.outcome = "cancelled".into();
            r.reason = Some("ancestor timed out".into());
            r.ended_at = Some(now);
            self.log(c, "child_cancelled", id);
        }
        let queued = std::mem::take(&mut self.agents[c].queue);
        for q in queued {
            let r = self.record(&q.package.spawn_id);
            r.outcome = "rejected".into();
            r.reason = Some("requester timed out".into());
            self.log(c, "spawn_rejected", format!("{} requester timed out", q.package.spawn_id));
        }
    }

    fn deliver(&mut self, c: usize, outcome: ChildOutcome) {
        let p = self.agents[c].parent.expect("children have parents");
        self.agents[p].running.retain(|x| *x != c);
        let spawn_id = self.agents[c].id.id.clone();
        if let Err(v) = self.tree.finish(&spawn_id, outcome.node_status(), self.now) {
            self.violations.push(v);
        }
        let now = self.now;
        let started = self.agents[c].child.as_ref().map_or(now, |i| i.started_at);
        {
            let r = self.record(&spawn_id);
            r.ended_at = Some(now);
            r.outcome = outcome.label().into();
            r.execution_time = now - started;
            if let ChildOutcome::Returned(res) = &outcome {
                r.tokens_used = res.metrics.tokens_used;
                r.api_calls = res.metrics.api_calls;
                r.execution_time = res.execution_time;
                r.test_pass_rate = Some(res.metrics.test_pass_rate);
            }
        }

        let failure = match outcome {
            ChildOutcome::Returned(resume) => {
                self.packages.push(Package::Resume(resume.clone()));
                let cfg = ReplayConfig {
                    promote_threshold: self.policy.promote_threshold,
                    staging: DiffStaging::Defer,
                };
                let report = replay_resume(
                    &mut self.agents[p].state,
                    &resume,
                    &cfg,
                    &KeyDecisionSummarizer,
                    &self.embedder,
                );
                let promoted = report.promotion.as_ref().map_or(0, |r| r.promoted_count());
                self.log(
                    p,
                    "child_return",
                    format!(
                        "{spawn_id} {} episodic+{} skills+{promoted} diffs={} rejected_diffs={}",
                        resume.status.as_str(),
                        report.episodic_added,
                        report.staged.len(),
                        report.diff_failures.len()
                    ),
                );
                if !report.staged.is_empty() {
                    let mut staged = resume;
                    staged.result.files_modified = report.staged.iter().map(|d| d.file.clone()).collect();
                    staged.result.code_diff = report.staged;
                    self.agents[p].batch.push(staged);
                }
                None
            }
            ChildOutcome::TimedOut { after } => Some(FailureKind::TimedOut {
                spawn_id: spawn_id.clone(),
                after,
            }),
            ChildOutcome::Invalid(issues) => Some(FailureKind::Invalid {
                spawn_id: spawn_id.clone(),
                issues,
            }),
            ChildOutcome::BackendFailed(message) => Some(FailureKind::Backend {
                spawn_id: spawn_id.clone(),
                message,
            }),
        };
        if let Some(f) = failure {
            self.log(p, "child_failure", f.to_string());
            handle_child_failure(&mut self.agents[p].state, &f, &self.embedder);
        }

        while self.agents[p].running.len() < self.config.concurrent_limit {
            let Some(req) = self.agents[p].queue.pop_front() else {
                break;
            };
            let id = req.package.spawn_id.clone();
            let parent_id = self.agents[p].id.clone();
            let verdict = start_request(&parent_id, req, &mut self.tree, self.config, self.now);
            self.settle(p, &id, verdict);
        }

        let parent = &self.agents[p];
        if parent.running.is_empty() && parent.queue.is_empty() {
            self.join(p);
            if self.agents[p].waiting {
                self.agents[p].waiting = false;
                self.schedule(self.now, Kind::Step, p);
            }
        }
        self.try_finish(p);
    }

    /// Merges every result collected since the last join into the agent's files.
    fn join(&mut self, p: usize) {
        let batch = std::mem::take(&mut self.agents[p].batch);
        if batch.is_empty() {
            return;
        }
        let outcome = merge_results(&batch, &self.agents[p].state.files, self.merger);
        let mut applied = 0;
        for d in &outcome.merged_diffs {
            let files = &mut self.agents[p].state.files;
            let base = files.get(&d.file).cloned().unwrap_or_default();
            match apply_diff(&base, d) {
                Ok(updated) => {
                    files.insert(d.file.clone(), updated);
                    applied += 1;
                }
                Err(e) => self.log(p, "apply_error", format!("{}: {e}", d.file)),
            }
        }
        if applied > 0 {
            if let Some(info) = self.agents[p].child.as_mut() {
                info.files_changed = true;
            }
        }
        for esc in &outcome.escalations {
            let text = format!(
                "escalated conflict between {} and {} in {}: {} vs {} hunks need a follow-up",
                esc.pair.left_child,
                esc.pair.right_child,
                esc.file,
                esc.left_hunks.len(),
                esc.right_hunks.len()
            );
            let id = format!("escalation:{}:{}:{}", esc.pair.left_child, esc.pair.right_child, esc.file);
            self.agents[p].state.note(&id, &text, &self.embedder);
        }
        let agent = &mut self.agents[p];
        if !outcome.escalations.is_empty() && agent.trajectory_done && !agent.waiting {
            // Nothing else would wake the agent for its follow-ups.
            agent.trajectory_done = false;
            self.schedule(self.now, Kind::Step, p);
        }
        self.agents[p].followups.extend(outcome.escalations.iter().cloned());
        self.merge.absorb(&outcome.stats);
        self.escalations += outcome.escalations.len();
        self.dropped_hunks += outcome.dropped.len();
        let s = outcome.stats;
        self.log(
            p,
            "join",
            format!(
                "results={} applied={applied} auto={} semantic={} escalated={} dropped={}",
                batch.len(),
                s.auto,
                s.semantic,
                s.escalated,
                outcome.dropped.len()
            ),
        );
    }

    fn into_outcome(mut self) -> RunOutcome {
        self.violations.extend(self.tree.verify());
        let root = self.agents.swap_remove(0);
        RunOutcome {
            completed: root.finished,
            tree: self.tree,
            events: self.events,
            spawns: self.spawns,
            merge: self.merge,
            escalations: self.escalations,
            followups_resolved: self.followups_resolved,
            packages: self.packages,
            dropped_hunks: self.dropped_hunks,
            blocked: self.blocked,
            violations: self.violations,
            final_state: root.state,
            root_steps: root.steps,
            end_time: self.now,
        }
    }
}
