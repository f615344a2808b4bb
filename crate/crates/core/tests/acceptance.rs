//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run alone with `cargo test --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{Deserialize, Deserializer, MapAccess, SeqAccess, Visitor};

use agentspawn::coherence::{apply_diff, merge_results, Diff, Hunk, StochasticMergeBackend, Tier as MergeTier};
use agentspawn::harness::{load_config, load_workload, run_simulation, RunConfig, WorkloadSpec};
use agentspawn::memory::{slice_memory, HashEmbedder, MemoryItem, MemoryStore, RelevanceWeights, TaskProfile, Tier};
use agentspawn::policy::{
    decide_spawn, dominant_specialization, update_calibration, Bounds, CalibrationState, ComplexityMetrics, Gate,
    RuntimeState, SpawnAction, SpawnPolicyConfig, Specialization,
};
use agentspawn::protocol::{
    decode_package, encode_package, Action, ActionKind, ChildMetrics, ChildResult, ExecutionContext, Package,
    PackageMemory, ResumePackage, ResumeStatus, SpawnMetrics, SpawnPackage, TaskSpec,
};
use agentspawn::runtime::{run_parent_loop, AgentPolicy, RuntimeConfig, ScriptedBackend};
use agentspawn::skills::{Provenance, Skill};

type Verdict = Result<String, String>;

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("slicing equals independent relevance scoring", c1_slicing_oracle),
        ("slices shrink with threshold and age", c2_monotonicity),
        ("spawn decisions equal brute-force recomputation", c3_spawn_oracle),
        ("dominant metric picks the mapped specialist", c4_specialization),
        ("package codec round trip and field names", c5_codec),
        ("semantic merge statistics", c6_coherence),
        ("calibration workload tier distribution", c7_tiers),
        ("calibration workload memory reduction", c8_reduction),
        ("depth, concurrency and timeout limits", c9_limits),
        ("byte-identical machine reports", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workload_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("workloads")
}

fn bundled(name: &str) -> WorkloadSpec {
    load_workload(&workload_dir().join(name)).expect("bundled workload loads")
}

/// Independent relevance scoring: keyword overlap, dependency overlap,
/// exponential recency and clamped cosine, weighted and clamped, written
/// against the fuzz domain below (lowercase alphanumeric tokens, a small
/// stopword set, paths always containing `/`).
mod oracle {
    use std::collections::BTreeSet;

    pub const STOP: [&str; 7] = ["the", "and", "of", "in", "to", "with", "for"];

    pub fn content(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .filter(|t| t.chars().count() >= 2 && !STOP.contains(&t.as_str()))
            .collect()
    }

    pub fn paths(text: &str) -> BTreeSet<String> {
        text.split_whitespace()
            .map(|w| w.trim_end_matches([',', '.']))
            .filter(|w| w.contains('/'))
            .map(str::to_string)
            .collect()
    }

    fn fnv(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn embed(text: &str, dim: usize) -> Vec<f64> {
        let mut counts = vec![0u32; dim];
        for t in content(text) {
            counts[(fnv(t.as_bytes()) % dim as u64) as usize] += 1;
        }
        let norm = counts.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; dim];
        }
        counts.iter().map(|&c| c as f64 / norm).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        }
    }

    fn unit(v: f64) -> f64 {
        if v.is_nan() {
            0.0
        } else {
            v.clamp(0.0, 1.0)
        }
    }

    pub struct Task {
        pub keywords: BTreeSet<String>,
        pub files: BTreeSet<String>,
        pub symbols: BTreeSet<String>,
        pub embedding: Vec<f64>,
    }

    impl Task {
        pub fn new(description: &str, files: &BTreeSet<String>, symbols: &BTreeSet<String>, dim: usize) -> Self {
            let mut all_files = files.clone();
            all_files.extend(paths(description));
            Task {
                keywords: content(description).into_iter().collect(),
                files: all_files,
                symbols: symbols.clone(),
                embedding: embed(description, dim),
            }
        }
    }

    pub struct Weights {
        pub a: f64,
        pub b: f64,
        pub g: f64,
        pub d: f64,
        pub lambda: f64,
    }

    pub fn relevance(
        task: &Task,
        w: &Weights,
        content_text: &str,
        files: &BTreeSet<String>,
        symbols: &BTreeSet<String>,
        embedding: &[f64],
        age: u64,
    ) -> f64 {
        let tokens: BTreeSet<String> = content(content_text).into_iter().collect();
        let kw = if task.keywords.is_empty() {
            0.0
        } else {
            task.keywords.iter().filter(|k| tokens.contains(*k)).count() as f64 / task.keywords.len() as f64
        };
        let refs = task.files.len() + task.symbols.len();
        let dep = if refs == 0 {
            0.0
        } else {
            let hits = task.files.iter().filter(|f| files.contains(*f)).count()
                + task.symbols.iter().filter(|s| symbols.contains(*s)).count();
            hits as f64 / refs as f64
        };
        let temporal = (-(w.lambda * age as f64)).exp();
        let semantic = unit(cosine(embedding, &task.embedding));
        unit(w.a * kw + w.b * dep + w.g * temporal + w.d * semantic)
    }
}

const VOCAB: [&str; 26] = [
    "parser", "lexer", "token", "cache", "router", "schema", "query", "render", "widget", "buffer", "stream",
    "socket", "index", "module", "config", "handler", "retry", "timeout", "json", "http", "db", "ui", "Parser",
    "TOKEN", "a", "x",
];
const PATHS: [&str; 5] = ["src/parser.rs", "src/lexer.rs", "src/db/pool.rs", "lib/ui/theme.css", "docs/api.md"];
const SYMBOLS: [&str; 4] = ["parse_value", "next_token", "open_pool", "render"];

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    let mut out: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        let w = match rng.gen_range(0..10) {
            0 => oracle::STOP.choose(rng).unwrap().to_string(),
            1 => PATHS.choose(rng).unwrap().to_string(),
            _ => VOCAB.choose(rng).unwrap().to_string(),
        };
        let punct = ["", "", "", ",", "."].choose(rng).unwrap();
        out.push(format!("{w}{punct}"));
    }
    out.join(" ")
}

fn subset(rng: &mut ChaCha8Rng, pool: &[&str], p: f64) -> BTreeSet<String> {
    pool.iter().filter(|_| rng.gen_bool(p)).map(|s| s.to_string()).collect()
}

struct FuzzStore {
    store: MemoryStore<f64>,
    task: TaskSpec,
    dim: usize,
    weights: RelevanceWeights<f64>,
    ow: oracle::Weights,
}

fn fuzz_store(rng: &mut ChaCha8Rng, max_items: usize) -> FuzzStore {
    let dim = *[16usize, 64, 256].choose(rng).unwrap();
    let now = rng.gen_range(0..200u64);
    let mut store = MemoryStore::new(dim).with_step(now);
    let n = rng.gen_range(0..=max_items);
    for i in 0..n {
        let content = words(rng, 0, 25);
        let embedding = match rng.gen_range(0..10) {
            0 => vec![0.0; dim],
            1 | 2 => {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm).collect()
            }
            _ => oracle::embed(&content, dim),
        };
        let item = MemoryItem {
            id: format!("m{i}"),
            tier: *Tier::ALL.choose(rng).unwrap(),
            content,
            referenced_files: subset(rng, &PATHS, 0.25),
            referenced_symbols: subset(rng, &SYMBOLS, 0.25),
            created_at_step: rng.gen_range(0..=now),
            embedding,
        };
        store.insert(item).expect("fuzzed item is valid");
    }
    let mut task = TaskSpec::new(format!("fix {}", words(rng, 1, 10)));
    task.referenced_files = subset(rng, &PATHS, 0.3);
    task.referenced_symbols = subset(rng, &SYMBOLS, 0.3);
    let (weights, ow) = if rng.gen_bool(0.5) {
        (
            RelevanceWeights::default(),
            oracle::Weights {
                a: 0.3,
                b: 0.3,
                g: 0.2,
                d: 0.2,
                lambda: 0.1,
            },
        )
    } else {
        let raw: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let sum: f64 = raw.iter().sum();
        let [a, b, g] = [raw[0] / sum, raw[1] / sum, raw[2] / sum];
        let d = 1.0 - a - b - g;
        let lambda = rng.gen_range(0.01..1.0);
        (
            RelevanceWeights::new(a, b, g, d, lambda).expect("normalized weights"),
            oracle::Weights { a, b, g, d, lambda },
        )
    };
    FuzzStore {
        store,
        task,
        dim,
        weights,
        ow,
    }
}

fn oracle_scores(f: &FuzzStore, now: u64) -> Vec<(String, f64)> {
    let t = oracle::Task::new(&f.task.description, &f.task.referenced_files, &f.task.referenced_symbols, f.dim);
    f.store
        .items()
        .iter()
        .map(|m| {
            let r = oracle::relevance(
                &t,
                &f.ow,
                &m.content,
                &m.referenced_files,
                &m.referenced_symbols,
                &m.embedding,
                now - m.created_at_step,
            );
            (m.id.clone(), r)
        })
        .collect()
}

fn slice_ids(f: &FuzzStore, theta: f64) -> Vec<String> {
    slice_memory(&f.store, &f.task, theta, &f.weights, &HashEmbedder::new(f.dim))
        .expect("slice")
        .items
        .into_iter()
        .map(|m| m.id)
        .collect()
}

fn c1_slicing_oracle() -> Verdict {
    let mut slicing = std::time::Duration::ZERO;
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ce);
    let (mut items, mut kept) = (0usize, 0usize);
    for s in 0..1000 {
        let f = fuzz_store(&mut rng, 200);
        let scores = oracle_scores(&f, f.store.current_step());
        // Half the thresholds sit exactly on an item's score.
        let theta = match scores.choose(&mut rng) {
            Some((_, r)) if rng.gen_bool(0.5) => *r,
            _ => rng.gen_range(0.0..=1.0),
        };
        let want: Vec<String> = scores.iter().filter(|(_, r)| *r > theta).map(|(id, _)| id.clone()).collect();
        let t = Instant::now();
        let got = slice_ids(&f, theta);
        slicing += t.elapsed();
        check(got == want, || format!("store {s}: slice {got:?} != oracle {want:?} at theta {theta}"))?;
        items += f.store.len();
        kept += got.len();
    }
    let secs = slicing.as_secs_f64();
    check(secs < 10.0, || format!("slicing took {secs:.2}s, limit 10s"))?;
    Ok(format!("1000 stores, {items} items, {kept} kept, 0 mismatches, slicing {secs:.2}s"))
}

fn c2_monotonicity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2077);
    let mut checks = 0usize;
    for s in 0..100 {
        let f = fuzz_store(&mut rng, 120);
        for k in 0..=20 {
            let theta = k as f64 / 20.0;
            let base: BTreeSet<String> = slice_ids(&f, theta).into_iter().collect();
            for eps in [1e-12, 0.01, 0.1] {
                let hi = (theta + eps).min(1.0);
                let tighter: BTreeSet<String> = slice_ids(&f, hi).into_iter().collect();
                check(tighter.is_subset(&base), || format!("store {s}: slice({hi}) not within slice({theta})"))?;
                checks += 1;
            }
        }
        let emb = HashEmbedder::new(f.dim);
        let profile = TaskProfile::new(&f.task, &emb);
        let now = f.store.current_step();
        for m in f.store.items() {
            let mut prev = f64::INFINITY;
            for later in now..now + 30 {
                let r = profile.relevance(m, &f.weights, later).expect("relevance");
                check(r <= prev, || format!("store {s}: {} rose from {prev} to {r} at step {later}", m.id))?;
                prev = r;
                checks += 1;
            }
        }
    }
    Ok(format!("100 stores, {checks} checks, 0 violations"))
}

const WEIGHTS: [f64; 5] = [0.30, 0.20, 0.25, 0.15, 0.10];
const SPECIALISTS: [Specialization; 5] = [
    Specialization::Refactoring,
    Specialization::Simplification,
    Specialization::TestingDebugging,
    Specialization::ContextCompression,
    Specialization::ResearchAnalysis,
];

fn first_max(v: &[f64; 5]) -> usize {
    let mut best = 0;
    for i in 1..5 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn random_metrics(rng: &mut ChaCha8Rng) -> [f64; 5] {
    let hi: [f64; 5] = [30.0, 70.0, 150.0, 1.0, 15.0];
    let prior_hi: [f64; 5] = [20.0, 50.0, 100.0, 1.0, 10.0];
    std::array::from_fn(|i| match rng.gen_range(0..10) {
        0 => 0.0,
        1 => prior_hi[i],
        _ => rng.gen_range(0.0..=hi[i]),
    })
}

fn c3_spawn_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a5a);
    let config = SpawnPolicyConfig::<f64>::default();
    check(config.weights == WEIGHTS && config.spawn_threshold == 0.7, || "default weights differ".into())?;
    let (mut spawns, mut mono) = (0usize, 0usize);
    for n in 0..10_000 {
        let mut cal = CalibrationState::<f64>::default();
        for _ in 0..rng.gen_range(0..4) {
            cal = update_calibration(&cal, &ComplexityMetrics::new(random_metrics(&mut rng)));
        }
        let raw = random_metrics(&mut rng);
        let runtime = RuntimeState {
            depth: rng.gen_range(0..5),
            active_children: rng.gen_range(0..6),
            steps_since_last_spawn: if rng.gen_bool(0.3) { None } else { Some(rng.gen_range(0..8)) },
        };
        let d = decide_spawn(&ComplexityMetrics::new(raw), &cal, &config, &runtime);

        let norm: [f64; 5] = std::array::from_fn(|i| {
            let (lo, hi) = (cal.bounds[i].min, cal.bounds[i].max);
            if hi == lo {
                0.0
            } else {
                ((raw[i] - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        });
        let score = (0..5).fold(0.0, |acc, i| acc + WEIGHTS[i] * norm[i]);
        let gate = if !(score > 0.7) {
            Some(Gate::BelowThreshold)
        } else if runtime.depth >= 3 {
            Some(Gate::DepthLimit)
        } else if runtime.active_children >= 4 {
            Some(Gate::ConcurrencyLimit)
        } else if runtime.steps_since_last_spawn.is_some_and(|s| s < 5) {
            Some(Gate::Cooldown)
        } else {
            None
        };
        let spec = gate.is_none().then(|| SPECIALISTS[first_max(&norm)]);
        let action = if gate.is_none() { SpawnAction::Spawn } else { SpawnAction::Continue };
        check(
            d.score == score && d.normalized == norm && d.blocked_by == gate && d.specialization == spec && d.action == action,
            || format!("vector {n} {raw:?}: got {d:?}, oracle score {score} gate {gate:?} spec {spec:?}"),
        )?;
        spawns += usize::from(spec.is_some());

        let i = rng.gen_range(0..5);
        let mut bumped = raw;
        bumped[i] = if i == 3 { rng.gen_range(raw[i]..=1.0) } else { raw[i] + rng.gen_range(0.0..10.0) };
        let d2 = decide_spawn(&ComplexityMetrics::new(bumped), &cal, &config, &runtime);
        check(d2.score >= d.score, || format!("vector {n}: raising metric {i} lowered the score"))?;
        mono += 1;
    }
    Ok(format!("10000 vectors, {spawns} spawns, {mono} monotonicity checks, 0 violations"))
}

fn c4_specialization() -> Verdict {
    let unit_cal = CalibrationState::with_priors([Bounds::new(0.0, 1.0); 5]).expect("priors");
    let config = SpawnPolicyConfig {
        spawn_threshold: 0.0,
        ..SpawnPolicyConfig::<f64>::default()
    };
    let expected_names = ["refactoring", "simplification", "testing_debugging", "context_compression", "research_analysis"];
    for (i, name) in expected_names.iter().enumerate() {
        let mut v = [0.1; 5];
        v[i] = 0.9;
        let got = dominant_specialization(&v);
        check(got.as_str() == *name, || format!("metric {i} dominant gave {got}"))?;
    }
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let (mut cases, mut ties) = (0usize, 0usize);
    for code in 0..5usize.pow(5) {
        let v: [f64; 5] = std::array::from_fn(|i| grid[(code / 5usize.pow(i as u32)) % 5]);
        let want = SPECIALISTS[first_max(&v)];
        let got = dominant_specialization(&v);
        check(got == want, || format!("{v:?}: got {got}, want {want}"))?;
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        if v.iter().filter(|x| **x == max).count() > 1 {
            ties += 1;
        }
        let d = decide_spawn(&ComplexityMetrics::new(v), &unit_cal, &config, &RuntimeState::default());
        if v.iter().any(|x| *x > 0.0) {
            check(d.specialization == Some(want), || format!("{v:?}: decide_spawn chose {:?}", d.specialization))?;
        }
        cases += 1;
    }
    Ok(format!("{cases} grid vectors ({ties} with ties), 5 single-dominant cases, 0 violations"))
}

/// JSON object tree with key order preserved.
enum Node {
    Object(Vec<(String, Node)>),
    Array(Vec<Node>),
    Leaf,
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Node;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("json")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> Result<Node, A::Error> {
                let mut out = Vec::new();
                while let Some(k) = m.next_key::<String>()? {
                    out.push((k, m.next_value::<Node>()?));
                }
                Ok(Node::Object(out))
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut s: A) -> Result<Node, A::Error> {
                let mut out = Vec::new();
                while let Some(n) = s.next_element::<Node>()? {
                    out.push(n);
                }
                Ok(Node::Array(out))
            }
            fn visit_bool<E>(self, _: bool) -> Result<Node, E> {
                Ok(Node::Leaf)
            }
            fn visit_i64<E>(self, _: i64) -> Result<Node, E> {
                Ok(Node::Leaf)
            }
            fn visit_u64<E>(self, _: u64) -> Result<Node, E> {
                Ok(Node::Leaf)
            }
            fn visit_f64<E>(self, _: f64) -> Result<Node, E> {
                Ok(Node::Leaf)
            }
            fn visit_str<E>(self, _: &str) -> Result<Node, E> {
                Ok(Node::Leaf)
            }
            fn visit_unit<E>(self) -> Result<Node, E> {
                Ok(Node::Leaf)
            }
        }
        d.deserialize_any(V)
    }
}

impl Node {
    fn keys(&self) -> Vec<&str> {
        match self {
            Node::Object(kv) => kv.iter().map(|(k, _)| k.as_str()).collect(),
            _ => Vec::new(),
        }
    }

    fn get(&self, key: &str) -> &Node {
        match self {
            Node::Object(kv) => kv.iter().find(|(k, _)| k == key).map(|(_, v)| v).unwrap_or(&Node::Leaf),
            _ => &Node::Leaf,
        }
    }
}

const SPAWN_FIELDS: [&str; 8] = ["spawn_id", "parent_id", "timestamp", "memory", "skills", "context", "task", "spawn_metrics"];
const MEMORY_FIELDS: [&str; 3] = ["episodic", "semantic", "working"];
const CONTEXT_FIELDS: [&str; 4] = ["repo_path", "current_file", "line_number", "pending_changes"];
const TASK_FIELDS: [&str; 3] = ["description", "constraints", "expected_outcome"];
const METRIC_FIELDS: [&str; 6] = ["I_f", "C_c", "F_c", "O_c", "U_c", "S_spawn"];
const RESUME_FIELDS: [&str; 7] = ["spawn_id", "status", "execution_time", "result", "trace", "skills_learned", "metrics"];
const RESULT_FIELDS: [&str; 3] = ["output", "code_diff", "files_modified"];
const CHILD_METRIC_FIELDS: [&str; 3] = ["tokens_used", "api_calls", "test_pass_rate"];

fn text(rng: &mut ChaCha8Rng, max: usize) -> String {
    const POOL: [&str; 16] = ["a", "Z", "0", " ", "\"", "\\", "\n", "\t", "é", "漢", "🚀", "{", "}", "/", "\u{1}", "touches"];
    (0..rng.gen_range(0..=max)).map(|_| *POOL.choose(rng).unwrap()).collect()
}

fn float(rng: &mut ChaCha8Rng, hi: f64) -> f64 {
    match rng.gen_range(0..6) {
        0 => 0.0,
        1 => hi,
        2 => f64::MIN_POSITIVE,
        _ => rng.gen_range(0.0..=hi),
    }
}

fn diffs(rng: &mut ChaCha8Rng) -> Vec<Diff> {
    (0..rng.gen_range(0..3))
        .map(|f| {
            let mut line = 1;
            let hunks = (0..rng.gen_range(0..4))
                .map(|_| {
                    line += rng.gen_range(0..5);
                    let old: Vec<String> = (0..rng.gen_range(0..3)).map(|_| text(rng, 6)).collect();
                    let new: Vec<String> = (0..rng.gen_range(0..3)).map(|_| text(rng, 6)).collect();
                    let h = Hunk::new(line, old.clone(), new);
                    line += old.len().max(1);
                    h
                })
                .collect();
            Diff::new(format!("src/f{f}.rs"), hunks)
        })
        .collect()
}

fn skill(rng: &mut ChaCha8Rng, n: usize) -> Skill {
    let mut s = Skill::built_in(format!("skill-{n}"), "Apply {fix} to {target}");
    if rng.gen_bool(0.5) {
        s.params.insert("fix".into(), text(rng, 8));
    }
    match rng.gen_range(0..3) {
        0 => {}
        1 => s.provenance = Provenance::Inherited,
        _ => {
            s.provenance = Provenance::Learned;
            s.success_stat = rng.gen_bool(0.7).then(|| float(rng, 1.0));
        }
    }
    s
}

fn item(rng: &mut ChaCha8Rng, tier: Tier, n: usize) -> MemoryItem<f64> {
    let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    MemoryItem {
        id: format!("m{n}"),
        tier,
        content: text(rng, 20),
        referenced_files: subset(rng, &PATHS, 0.3),
        referenced_symbols: subset(rng, &SYMBOLS, 0.3),
        created_at_step: rng.gen_range(0..1000),
        embedding: v,
    }
}

fn spawn_package(rng: &mut ChaCha8Rng, n: usize) -> SpawnPackage {
    let mut memory = PackageMemory::default();
    for i in 0..rng.gen_range(0..6) {
        let tier = *Tier::ALL.choose(rng).unwrap();
        let it = item(rng, tier, i);
        match tier {
            Tier::Episodic => memory.episodic.push(it),
            Tier::Semantic => memory.semantic.push(it),
            Tier::Working => memory.working.push(it),
        }
    }
    let mut task = TaskSpec::new(format!("task {}", text(rng, 30)));
    task.constraints = (0..rng.gen_range(0..3)).map(|_| format!("keep {}", text(rng, 10))).collect();
    task.expected_outcome = text(rng, 12);
    task.referenced_files = subset(rng, &PATHS, 0.4);
    task.referenced_symbols = subset(rng, &SYMBOLS, 0.4);
    SpawnPackage {
        spawn_id: format!("spawn-{n:04}"),
        parent_id: if rng.gen_bool(0.5) { "root".into() } else { format!("spawn-{:04}", rng.gen_range(1..n.max(2))) },
        timestamp: float(rng, 1e6),
        memory,
        skills: (0..rng.gen_range(0..3)).map(|i| skill(rng, i)).collect(),
        context: ExecutionContext {
            repo_path: text(rng, 10),
            current_file: text(rng, 10),
            line_number: rng.gen_range(0..10_000),
            pending_changes: diffs(rng),
        },
        task,
        spawn_metrics: SpawnMetrics::new(
            &ComplexityMetrics::new([float(rng, 40.0), float(rng, 90.0), float(rng, 200.0), float(rng, 1.0), float(rng, 20.0)]),
            float(rng, 1.0),
        ),
    }
}

fn resume_package(rng: &mut ChaCha8Rng, n: usize) -> ResumePackage {
    let code_diff = diffs(rng);
    let mut step = 0;
    ResumePackage {
        spawn_id: format!("spawn-{n:04}"),
        status: *[ResumeStatus::Success, ResumeStatus::Failure, ResumeStatus::Partial].choose(rng).unwrap(),
        execution_time: float(rng, 600.0),
        result: ChildResult {
            output: text(rng, 40),
            files_modified: code_diff.iter().map(|d| d.file.clone()).collect(),
            code_diff,
        },
        trace: (0..rng.gen_range(0..6))
            .map(|_| {
                step += rng.gen_range(1..4);
                let kind = *[ActionKind::Decision, ActionKind::Edit, ActionKind::ToolCall, ActionKind::Observation]
                    .choose(rng)
                    .unwrap();
                Action::new(step, kind, text(rng, 15))
            })
            .collect(),
        skills_learned: (0..rng.gen_range(0..3)).map(|i| skill(rng, i)).collect(),
        metrics: ChildMetrics {
            tokens_used: rng.gen(),
            api_calls: rng.gen_range(0..1000),
            test_pass_rate: float(rng, 1.0),
        },
    }
}

fn c5_codec() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let mut bytes = 0usize;
    for n in 1..=1000 {
        let package = if n % 2 == 0 {
            Package::Spawn(spawn_package(&mut rng, n))
        } else {
            Package::Resume(resume_package(&mut rng, n))
        };
        let enc = encode_package(&package);
        let dec = decode_package(&enc).map_err(|e| format!("package {n} failed to decode: {e}"))?;
        check(dec == package, || format!("package {n} changed in a round trip"))?;
        check(encode_package(&dec) == enc, || format!("package {n} re-encodes differently"))?;
        bytes += enc.len();

        let tree: Node = serde_json::from_slice(&enc).map_err(|e| e.to_string())?;
        let expect = |node: &Node, want: &[&str], what: &str| {
            check(node.keys() == want, || format!("package {n} {what} keys {:?} != {want:?}", node.keys()))
        };
        match &package {
            Package::Spawn(_) => {
                expect(&tree, &SPAWN_FIELDS, "top-level")?;
                expect(tree.get("memory"), &MEMORY_FIELDS, "memory")?;
                expect(tree.get("context"), &CONTEXT_FIELDS, "context")?;
                expect(tree.get("task"), &TASK_FIELDS, "task")?;
                expect(tree.get("spawn_metrics"), &METRIC_FIELDS, "spawn_metrics")?;
            }
            Package::Resume(_) => {
                expect(&tree, &RESUME_FIELDS, "top-level")?;
                expect(tree.get("result"), &RESULT_FIELDS, "result")?;
                expect(tree.get("metrics"), &CHILD_METRIC_FIELDS, "metrics")?;
                if let Node::Array(actions) = tree.get("trace") {
                    for a in actions {
                        expect(a, &["step", "kind", "summary"], "trace action")?;
                    }
                }
            }
        }
    }
    Ok(format!("1000 packages ({bytes} bytes), lossless and canonical, field names exact"))
}

fn resume(n: usize, diff: Diff) -> ResumePackage {
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

fn edit(base: &[String], start: usize, len: usize, tag: &str) -> Hunk {
    let old = base[start - 1..start - 1 + len].to_vec();
    let new = old.iter().map(|l| format!("{l} [{tag}]")).collect::<Vec<_>>();
    Hunk::new(start, old, new)
}

fn c6_coherence() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0073);
    let mut backend = StochasticMergeBackend::new(0.73, rng.gen());
    let base: Vec<String> = (1..=30).map(|i| format!("line {i}")).collect();
    let files = |f: &str| BTreeMap::from([(f.to_string(), base.clone())]);

    let (mut successes, mut escalated) = (0usize, 0usize);
    for i in 0..10_000 {
        let file = format!("src/c{i}.rs");
        let (a, la) = (rng.gen_range(1..=25), rng.gen_range(1..=3));
        let (b, lb) = (rng.gen_range(a..a + la), rng.gen_range(1..=3));
        let left = Diff::new(file.clone(), vec![edit(&base, a, la, "left")]);
        let right = Diff::new(file.clone(), vec![edit(&base, b, lb, "right")]);
        let out = merge_results(&[resume(1, left), resume(2, right)], &files(&file), &mut backend);
        check(out.resolutions.len() == 1, || format!("conflict {i}: {} resolutions", out.resolutions.len()))?;
        let r = &out.resolutions[0];
        match r.tier {
            MergeTier::Semantic => {
                check(r.success, || format!("conflict {i}: semantic tier without success"))?;
                successes += 1;
            }
            MergeTier::Escalated => {
                check(!r.success, || format!("conflict {i}: escalation marked successful"))?;
                escalated += 1;
                // Nothing from either child may reach the merged output.
                let mut merged = base.clone();
                for d in &out.merged_diffs {
                    merged = apply_diff(&merged, d).map_err(|e| format!("conflict {i}: {e}"))?;
                }
                check(merged == base, || format!("conflict {i}: escalated hunks merged silently"))?;
                check(out.escalations.len() == 1, || format!("conflict {i}: escalation record missing"))?;
            }
            MergeTier::Auto => return Err(format!("conflict {i}: overlapping edits auto-merged")),
        }
    }
    let rate = successes as f64 / 10_000.0;
    check((rate - 0.73).abs() <= 0.02, || format!("semantic success rate {rate:.4} outside 0.73 +- 0.02"))?;

    let mut disjoint = 0;
    for i in 0..2_000 {
        let file = format!("src/d{i}.rs");
        let (a, la) = (rng.gen_range(1..=12), rng.gen_range(1..=3));
        let b = rng.gen_range(a + la..=28);
        let lb = rng.gen_range(1..=(31 - b).min(3));
        let left = Diff::new(file.clone(), vec![edit(&base, a, la, "left")]);
        let right = Diff::new(file.clone(), vec![edit(&base, b, lb, "right")]);
        let (l, r) = if rng.gen_bool(0.5) { (left, right) } else { (right, left) };
        let out = merge_results(&[resume(1, l.clone()), resume(2, r.clone())], &files(&file), &mut backend);
        let res = &out.resolutions[0];
        check(res.tier == MergeTier::Auto && res.success, || format!("disjoint conflict {i} resolved as {:?}", res.tier))?;
        let merged = apply_diff(&base, &out.merged_diffs[0]).map_err(|e| e.to_string())?;
        let sequential = apply_diff(&apply_diff(&base, &l).unwrap(), &r).map_err(|e| e.to_string())?;
        check(merged == sequential, || format!("disjoint conflict {i}: merge differs from sequential edits"))?;
        disjoint += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    check(secs < 30.0, || format!("took {secs:.2}s, limit 30s"))?;
    Ok(format!(
        "semantic success {rate:.4} over 10000 overlapping ({escalated} escalated, none leaked); {disjoint}/2000 disjoint auto-merged"
    ))
}

fn calibration_config() -> RunConfig {
    load_config(&workload_dir().join("config.toml")).expect("bundled config")
}

fn c7_tiers() -> Verdict {
    let spec = bundled("multi_file_fix.json");
    let mut lines = Vec::new();
    let mut total = 0;
    for seed in 0..3 {
        let r = run_simulation(&spec, &calibration_config(), seed).map_err(|e| e.to_string())?;
        let m = r.merge_totals();
        total = m.total();
        check(total >= 10_000, || format!("only {total} conflicts"))?;
        let (a, s, e) = m.rates().expect("conflicts present");
        for (name, got, want) in [("auto", a, 0.15), ("semantic", s, 0.73), ("escalated", e, 0.12)] {
            check((got - want).abs() <= 0.02, || format!("seed {seed}: {name} {got:.4} outside {want} +- 0.02"))?;
        }
        lines.push(format!("seed {seed}: {:.1}/{:.1}/{:.1}%", a * 100.0, s * 100.0, e * 100.0));
    }
    Ok(format!("{total} conflicts per run; {}", lines.join(", ")))
}

fn c8_reduction() -> Verdict {
    let spec = bundled("multi_file_fix.json");
    let r = run_simulation(&spec, &calibration_config(), 0).map_err(|e| e.to_string())?;
    let reduction = r.reduction.ok_or("no spawns")?;
    check((reduction - 0.42).abs() <= 0.05, || format!("reduction {reduction:.4} outside 0.42 +- 0.05"))?;

    // Brute force: whitespace tokens of the full store against those of the
    // items that clear the threshold at the spawn step.
    let words = |s: &str| s.split_whitespace().count();
    let parent: usize = spec.memory.iter().map(|m| words(&m.content)).sum();
    let spawn_step = spec.start_step
        + spec
            .trajectory
            .iter()
            .position(|s| s.parallel > 1)
            .ok_or("calibration workload has no fan-out step")? as u64;
    let t = oracle::Task::new(
        &spec.task.description,
        &spec.task.referenced_files,
        &spec.task.referenced_symbols,
        spec.embedding_dim,
    );
    let w = oracle::Weights {
        a: 0.3,
        b: 0.3,
        g: 0.2,
        d: 0.2,
        lambda: 0.1,
    };
    let mut kept_ids = BTreeSet::new();
    let mut sliced = 0;
    for m in &spec.memory {
        let r = oracle::relevance(
            &t,
            &w,
            &m.content,
            &m.referenced_files,
            &m.referenced_symbols,
            &oracle::embed(&m.content, spec.embedding_dim),
            spawn_step - m.created_at_step,
        );
        if r > 0.5 {
            sliced += words(&m.content);
            kept_ids.insert(m.id.clone());
        }
    }
    let brute = 1.0 - sliced as f64 / parent as f64;
    for s in &r.spawns {
        check(s.parent_tokens == parent && s.slice_tokens == sliced, || {
            format!("{}: reported {}->{} tokens, brute force {parent}->{sliced}", s.spawn_id, s.parent_tokens, s.slice_tokens)
        })?;
    }
    for p in &r.packages {
        if let Package::Spawn(sp) = p {
            let ids: BTreeSet<String> = sp.memory.items().map(|m| m.id.clone()).collect();
            check(ids == kept_ids, || format!("{}: packaged slice differs from brute force", sp.spawn_id))?;
        }
    }
    check((brute - reduction).abs() < 1e-12, || format!("brute force {brute} != reported {reduction}"))?;
    Ok(format!(
        "reduction {:.1}% ({parent} -> {sliced} tokens, {} of {} items), matches brute force",
        reduction * 100.0,
        kept_ids.len(),
        spec.memory.len()
    ))
}

/// Largest number of simultaneously running children of any one parent,
/// from the start and end times in the report.
fn peak_concurrency(r: &agentspawn::harness::RunReport) -> usize {
    let mut by_parent: BTreeMap<&str, Vec<(f64, i32)>> = BTreeMap::new();
    for s in &r.spawns {
        if let (Some(a), Some(b)) = (s.started_at, s.ended_at) {
            let ev = by_parent.entry(&s.parent_id).or_default();
            ev.push((a, 1));
            ev.push((b, -1));
        }
    }
    let mut peak = 0;
    for ev in by_parent.values_mut() {
        // Ends sort before starts at the same instant.
        ev.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut live = 0i32;
        for (_, d) in ev.iter() {
            live += d;
            peak = peak.max(live as usize);
        }
    }
    peak
}

fn c9_limits() -> Verdict {
    let config = calibration_config();

    let deep = run_simulation(&bundled("deep_nesting.json"), &config, 1).map_err(|e| e.to_string())?;
    check(deep.completed, || "deep run incomplete".into())?;
    check(deep.violations == 0, || format!("{} tree violations", deep.violations))?;
    check(deep.tree_depth == 3, || format!("tree depth {}", deep.tree_depth))?;
    check(deep.spawns.iter().all(|s| s.depth <= 3), || "a spawn sits below depth 3".into())?;
    let depth_blocks = deep.blocked.get("depth_limit").copied().unwrap_or(0);
    check(depth_blocks >= 1, || "no depth-4 spawn was attempted".into())?;

    // Same workload with the policy gate lifted: the scheduler must refuse.
    let spec = bundled("deep_nesting.json");
    let mut policy = AgentPolicy::default();
    policy.spawn.max_depth = 10;
    let mut backend = ScriptedBackend::new(spec.children.clone());
    let mut merger = StochasticMergeBackend::new(0.73, 0);
    let out = run_parent_loop(
        &spec.task_spec(),
        spec.initial_state(policy.inherit_threshold),
        spec.trajectory.clone(),
        &policy,
        &RuntimeConfig::default(),
        &mut backend,
        &mut merger,
    )
    .map_err(|e| e.to_string())?;
    let rejected: Vec<_> = out.spawns.iter().filter(|s| s.outcome == "rejected").collect();
    check(!rejected.is_empty() && rejected.iter().all(|s| s.reason.is_some()), || "depth-4 request not rejected with a reason".into())?;
    check(out.violations.is_empty() && out.tree.max_depth_reached() == 3, || format!("{:?}", out.violations))?;
    check(out.completed, || "backstop run incomplete".into())?;

    let wide = run_simulation(&bundled("wide_fanout.json"), &config, 1).map_err(|e| e.to_string())?;
    let peak = peak_concurrency(&wide);
    check(wide.violations == 0 && peak == 4, || format!("peak concurrency {peak}, {} violations", wide.violations))?;
    check(wide.spawns_requested == 6 && wide.spawns_queued == 2 && wide.successes == 6, || {
        format!("fan-out: {} requested, {} queued, {} succeeded", wide.spawns_requested, wide.spawns_queued, wide.successes)
    })?;

    let slow_spec = bundled("slow_child.json");
    let before = slow_spec.memory.iter().filter(|m| m.tier == Tier::Episodic).count();
    let slow = run_simulation(&slow_spec, &config, 1).map_err(|e| e.to_string())?;
    let child = slow.spawns.first().ok_or("slow child never spawned")?;
    check(child.outcome == "timed_out" && child.ended_at == child.started_at.map(|t| t + 600.0), || {
        format!("slow child ended {:?} as {}", child.ended_at, child.outcome)
    })?;
    check(slow.completed, || "parent did not complete after the timeout".into())?;
    check(slow.episodic_items == before + 1, || format!("episodic {} -> {}", before, slow.episodic_items))?;

    Ok(format!(
        "depth 3 reached, {depth_blocks} depth-4 attempts gated and {} rejected by the scheduler; peak 4 of 6 concurrent; 700 s child timed out at 600 s",
        rejected.len()
    ))
}

fn c10_determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_agentspawn");
    let dir = workload_dir();
    let run = |seed: u64| -> Result<Vec<u8>, String> {
        let out = Command::new(bin)
            .arg("run")
            .arg("--workload")
            .arg(dir.join("multi_file_fix.json"))
            .arg("--config")
            .arg(dir.join("config.toml"))
            .args(["--seed", &seed.to_string(), "--format", "machine"])
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        Ok(out.stdout)
    };
    let results: Vec<Result<(u64, bool, Vec<u8>), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..20u64)
            .map(|seed| {
                s.spawn(move || {
                    let a = run(seed)?;
                    let b = run(seed)?;
                    Ok((seed, a == b, a))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("thread")).collect()
    });
    let mut digests = BTreeSet::new();
    for r in results {
        let (seed, same, bytes) = r?;
        check(same, || format!("seed {seed}: reports differ"))?;
        let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
        check(text.contains(&format!("seed={seed}\n")), || format!("seed {seed}: report lacks its seed"))?;
        digests.insert(text);
    }
    Ok(format!("20 seeds x 2 runs identical, {} distinct reports", digests.len()))
}
