use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::{Diff, Hunk};
use crate::memory::{HashEmbedder, RelevanceWeights, TaskProfile, Tier};
use crate::policy::Specialization;
use crate::protocol::{Action, ActionKind};
use crate::runtime::{ChildScript, TrajectoryStep};
use crate::skills::Skill;

use super::workload::{ConflictSpec, MemoryFixture, TaskFixture, WorkloadSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerateError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("params error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid params: {0}")]
    Invalid(String),
    #[error("could not reach the relevance target after {0} candidates")]
    Exhausted(usize),
}

/// Knobs of the synthetic workload generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub name: String,
    pub item_count: usize,
    /// Fraction of items that must score strictly above the threshold at
    /// the spawn step.
    pub relevance_target_quantile: f64,
    pub relevance_threshold: f64,
    /// Target shares of auto, semantic and escalated resolutions.
    pub conflict_mix: [f64; 3],
    /// Semantic merge success probability; derived from the mix when unset.
    pub p_semantic: Option<f64>,
    pub conflict_count: usize,
    pub embedding_dim: usize,
    /// Quiet steps before the spawn step.
    pub cold_steps: usize,
    /// Children requested at the spawn step.
    pub parallel: u32,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            item_count: 1000,
            relevance_target_quantile: 0.5,
            relevance_threshold: 0.5,
            conflict_mix: [0.15, 0.73, 0.12],
            p_semantic: None,
            conflict_count: 10_000,
            embedding_dim: HashEmbedder::DEFAULT_DIM,
            cold_steps: 3,
            parallel: 2,
            min_words: 20,
            max_words: 60,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: String| Err(GenerateError::Invalid(m));
        if self.item_count == 0 {
            return bad("item_count must be positive".into());
        }
        for (name, v) in [
            ("relevance_target_quantile", self.relevance_target_quantile),
            ("relevance_threshold", self.relevance_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.conflict_mix.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("conflict_mix entries must lie in [0, 1]".into());
        }
        let sum: f64 = self.conflict_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("conflict_mix sums to {sum}, expected 1"));
        }
        match self.p_semantic {
            Some(p) if !(0.0..=1.0).contains(&p) => return bad(format!("p_semantic {p} outside [0, 1]")),
            None if self.conflict_mix[1] + self.conflict_mix[2] <= 0.0 && self.conflict_count > 0 => {
                return bad("p_semantic cannot be derived from a mix with no overlapping share".into())
            }
            _ => {}
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.parallel == 0 {
            return bad("parallel must be at least 1".into());
        }
        if self.min_words < 12 || self.max_words < self.min_words {
            return bad("need 12 <= min_words <= max_words".into());
        }
        Ok(())
    }

    /// Semantic success probability that turns the overlapping share of the
    /// mix into the requested semantic and escalated shares.
    pub fn semantic_p(&self) -> f64 {
        self.p_semantic.unwrap_or_else(|| {
            let overlap = self.conflict_mix[1] + self.conflict_mix[2];
            if overlap > 0.0 {
                self.conflict_mix[1] / overlap
            } else {
                crate::coherence::DEFAULT_SEMANTIC_P
            }
        })
    }
}

pub fn parse_params(text: &str) -> Result<GeneratorParams, GenerateError> {
    let de = toml::Deserializer::parse(text).map_err(|e| GenerateError::Parse {
        path: String::new(),
        message: e.to_string(),
    })?;
    let params: GeneratorParams = serde_path_to_error::deserialize(de).map_err(|e| GenerateError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    params.validate()?;
    Ok(params)
}

pub fn load_params(path: &Path) -> Result<GeneratorParams, GenerateError> {
    let text = std::fs::read_to_string(path).map_err(|e| GenerateError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_params(&text)
}

const TASK: &str = "Fix token lookahead handling in src/json/parser.rs and keep src/json/lexer.rs callers in sync";
const FILES: [&str; 2] = ["src/json/parser.rs", "src/json/lexer.rs"];
const SYMBOLS: [&str; 2] = ["parse_value", "next_token"];
const OTHER_FILES: [&str; 6] = [
    "src/http/router.rs",
    "src/db/pool.rs",
    "docs/setup.md",
    "src/ui/theme.css",
    "build.gradle",
    "src/cache/lru.rs",
];
const OTHER_SYMBOLS: [&str; 4] = ["render_page", "open_pool", "evict", "route"];
const FILLER: [&str; 64] = [
    "cache", "widget", "banner", "pool", "router", "theme", "color", "schema", "migration", "queue", "worker",
    "socket", "timer", "budget", "review", "meeting", "deploy", "staging", "metric", "dashboard", "alert",
    "page", "layout", "button", "font", "image", "upload", "session", "cookie", "login", "profile", "avatar",
    "invoice", "report", "export", "import", "backup", "restore", "mirror", "replica", "shard", "index",
    "query", "column", "table", "row", "batch", "cron", "retry", "latency", "throughput", "memory", "disk",
    "network", "packet", "frame", "codec", "audio", "video", "stream", "buffer", "config", "feature", "flag",
];
const TIERS: [Tier; 5] = [Tier::Episodic, Tier::Episodic, Tier::Semantic, Tier::Semantic, Tier::Working];

/// Builds a workload whose spawn step keeps exactly
/// `round(item_count * relevance_target_quantile)` items above the
/// relevance threshold, and whose conflict batch follows `conflict_mix`.
/// Deterministic for a given seed.
pub fn generate_synthetic(seed: u64, params: &GeneratorParams) -> Result<WorkloadSpec, GenerateError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = TaskFixture {
        description: TASK.into(),
        constraints: vec!["keep the public parse API unchanged".into()],
        expected_outcome: "parser and lexer agree on lookahead".into(),
        referenced_files: FILES.iter().map(|s| s.to_string()).collect(),
        referenced_symbols: SYMBOLS.iter().map(|s| s.to_string()).collect(),
    };
    let start_step = 100u64;
    let spawn_step = start_step + params.cold_steps as u64;
    let embedder = HashEmbedder::new(params.embedding_dim);
    let profile = TaskProfile::<f64>::new(&(&task).into(), &embedder);
    let weights = RelevanceWeights::<f64>::default();
    let keywords: Vec<String> = profile.keywords.iter().cloned().collect();

    let want_kept = (params.item_count as f64 * params.relevance_target_quantile).round() as usize;
    let mut need = [want_kept, params.item_count - want_kept];
    let mut memory = Vec::with_capacity(params.item_count);
    let max_attempts = params.item_count * 200 + 1000;
    let mut attempts = 0;
    while need[0] + need[1] > 0 {
        attempts += 1;
        if attempts > max_attempts {
            return Err(GenerateError::Exhausted(attempts - 1));
        }
        // Lean towards whichever class is still short.
        let strength: f64 = if need[1] == 0 {
            rng.gen_range(0.5..1.0)
        } else if need[0] == 0 {
            rng.gen_range(0.0..0.5)
        } else {
            rng.gen()
        };
        let fixture = candidate(&mut rng, memory.len() + 1, strength, start_step, &keywords, params);
        let item = fixture.to_item(&embedder);
        let r = profile
            .relevance(&item, &weights, spawn_step)
            .expect("candidate built for this profile");
        let class = usize::from(r <= params.relevance_threshold);
        if need[class] > 0 {
            need[class] -= 1;
            memory.push(fixture);
        }
    }

    let mut spec = WorkloadSpec::new(params.name.clone(), task);
    spec.embedding_dim = params.embedding_dim;
    spec.start_step = start_step;
    spec.memory = memory;
    spec.files = BTreeMap::from([
        (FILES[0].to_string(), numbered("parser", 40)),
        (FILES[1].to_string(), numbered("lexer", 30)),
    ]);
    spec.skills = vec![
        Skill::built_in("trace-tokens", "Trace token flow through {module} and log each lookahead decision"),
        Skill::built_in("write-changelog", "Summarize release notes for {version}"),
    ];
    let cold = TrajectoryStep::new([2.0, 5.0, 10.0, 0.3, 1.0]);
    spec.trajectory = vec![cold.clone(); params.cold_steps];
    spec.trajectory
        .push(TrajectoryStep::new([18.0, 35.0, 70.0, 0.8, 7.0]).with_parallel(params.parallel));
    spec.trajectory.extend([cold.clone(), cold]);
    spec.children = BTreeMap::from([(Specialization::Refactoring, child_scripts(params.parallel))]);
    spec.p_semantic = params.semantic_p();
    spec.conflicts = (params.conflict_count > 0).then(|| ConflictSpec {
        count: params.conflict_count,
        disjoint_fraction: params.conflict_mix[0],
        lines_per_file: 40,
    });
    Ok(spec)
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix} line {i}")).collect()
}

/// One memory item whose relevance rises with `strength`: more task
/// keywords, more task references and a more recent step.
fn candidate(
    rng: &mut ChaCha8Rng,
    n: usize,
    strength: f64,
    start_step: u64,
    keywords: &[String],
    params: &GeneratorParams,
) -> MemoryFixture {
    let len = rng.gen_range(params.min_words..=params.max_words);
    let kw_count = ((strength * keywords.len() as f64).round() as usize).min(len / 2);
    let mut words: Vec<String> = keywords.choose_multiple(rng, kw_count).cloned().collect();
    while words.len() < len {
        words.push(FILLER.choose(rng).expect("non-empty").to_string());
    }
    words.shuffle(rng);

    let mut files = BTreeSet::new();
    let mut symbols = BTreeSet::new();
    for (i, f) in FILES.iter().enumerate() {
        if rng.gen_bool(strength * 0.9) {
            files.insert(f.to_string());
        }
        if rng.gen_bool(strength * 0.7) {
            symbols.insert(SYMBOLS[i].to_string());
        }
    }
    if rng.gen_bool(0.3) {
        files.insert(OTHER_FILES.choose(rng).expect("non-empty").to_string());
    }
    if rng.gen_bool(0.2) {
        symbols.insert(OTHER_SYMBOLS.choose(rng).expect("non-empty").to_string());
    }
    let max_age = (60.0 * (1.0 - strength)).round() as u64 + 1;
    let age = rng.gen_range(0..max_age).min(start_step);
    MemoryFixture {
        id: format!("m{n:04}"),
        tier: *TIERS.choose(rng).expect("non-empty"),
        content: words.join(" "),
        referenced_files: files,
        referenced_symbols: symbols,
        created_at_step: start_step - age,
    }
}

fn child_scripts(parallel: u32) -> Vec<ChildScript> {
    (1..=parallel)
        .map(|k| {
            // Each child rewrites its own two-line band of the parser.
            let line = 4 * k as usize - 3;
            let hunk = Hunk::new(
                line,
                [format!("parser line {line}"), format!("parser line {}", line + 1)],
                [format!("parser line {line} (lookahead fix {k})"), format!("parser line {} (lookahead fix {k})", line + 1)],
            );
            let mut diffs = vec![Diff::new(FILES[0], vec![hunk])];
            if k == 1 {
                diffs.push(Diff::new(FILES[1], vec![Hunk::new(3, ["lexer line 3"], ["lexer line 3 (peek)"])]));
            }
            ChildScript {
                spawn_id: Some(format!("spawn-{k:04}")),
                execution_time: 40.0 + 5.0 * k as f64,
                output: format!("lookahead fix part {k} applied"),
                diffs,
                skills_learned: if k == 1 {
                    vec![Skill::learned("peek-before-consume", "Peek at the next token in {module} before consuming it", None)]
                } else {
                    Vec::new()
                },
                test_pass_rate: 0.9,
                tokens_used: 12_000 + 1_000 * u64::from(k),
                api_calls: 8 + u64::from(k),
                trace: vec![
                    Action::new(1, ActionKind::Observation, "read parser and lexer"),
                    Action::new(2, ActionKind::Decision, "peek instead of consuming on lookahead"),
                    Action::new(3, ActionKind::Edit, "rewrite lookahead branch"),
                    Action::new(4, ActionKind::ToolCall, "run parser tests"),
                    Action::new(5, ActionKind::Observation, "tests pass"),
                ],
                ..ChildScript::default()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::parse_workload;

    fn small() -> GeneratorParams {
        GeneratorParams {
            item_count: 200,
            conflict_count: 50,
            ..GeneratorParams::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_synthetic(5, &small()).unwrap();
        assert_eq!(a, generate_synthetic(5, &small()).unwrap());
        assert_ne!(a, generate_synthetic(6, &small()).unwrap());
        assert_eq!(parse_workload(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn derived_semantic_p() {
        let p = GeneratorParams::default().semantic_p();
        assert!((p - 0.73 / 0.85).abs() < 1e-12);
    }

    #[test]
    fn params_from_toml() {
        let p = parse_params("item_count = 10\nconflict_mix = [0.2, 0.7, 0.1]\n").unwrap();
        assert_eq!(p.item_count, 10);
        assert!(parse_params("conflict_mix = [0.5, 0.7, 0.1]").is_err());
        assert!(matches!(parse_params("bogus = 1"), Err(GenerateError::Parse { .. })));
    }
}
