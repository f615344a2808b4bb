use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ResumePackage;

use super::diff::{apply_diff, ApplyError, Diff, Hunk};

/// Default success probability of the bundled semantic merge backend.
pub const DEFAULT_SEMANTIC_P: f64 = 0.73;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("cannot merge diffs of different files `{0}` and `{1}`")]
    DifferentFiles(String, String),
    #[error("diffs for `{0}` overlap at line level")]
    NotDisjoint(String),
    #[error("merged diff does not apply: {0}")]
    Apply(#[from] ApplyError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeBackendError {
    #[error("backend declined: {0}")]
    Declined(String),
    #[error("backend transport failure: {0}")]
    Transport(String),
}

/// Proposes a reconciliation of two overlapping diffs of the same file.
pub trait MergeBackend {
    fn propose(&mut self, left: &Diff, right: &Diff, base: &[String]) -> Result<Diff, MergeBackendError>;
}

/// Seeded stand-in for a model-driven merge: succeeds with probability `p`.
///
/// On success the proposal keeps every left hunk plus each right hunk that
/// overlaps no left hunk.
#[derive(Debug, Clone)]
pub struct StochasticMergeBackend {
    p: f64,
    rng: ChaCha8Rng,
}

impl StochasticMergeBackend {
    /// # Panics
    /// If `p` is outside `[0, 1]`.
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&p), "success probability must lie in [0, 1]");
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl MergeBackend for StochasticMergeBackend {
    fn propose(&mut self, left: &Diff, right: &Diff, _base: &[String]) -> Result<Diff, MergeBackendError> {
        if !self.rng.gen_bool(self.p) {
            return Err(MergeBackendError::Declined("intents could not be reconciled".into()));
        }
        Ok(prefer_left_union(left, right))
    }
}

/// Left hunks plus right hunks that overlap none of them.
pub fn prefer_left_union(left: &Diff, right: &Diff) -> Diff {
    let mut hunks = left.hunks.clone();
    hunks.extend(
        right
            .hunks
            .iter()
            .filter(|r| !left.hunks.iter().any(|l| l.overlaps(r)))
            .cloned(),
    );
    Diff::new(left.file.clone(), hunks).normalized()
}

/// Whether the two change sets share a file.
pub fn file_overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().any(|f| large.contains(f))
}

/// Every hunk pair across the two diffs is disjoint.
pub fn line_disjoint(a: &Diff, b: &Diff) -> bool {
    a.hunks
        .iter()
        .all(|x| b.hunks.iter().all(|y| !x.overlaps(y)))
}

/// Union of two line-disjoint diffs of one file, validated against `base`.
pub fn auto_merge(a: &Diff, b: &Diff, base: &[String]) -> Result<Diff, MergeError> {
    if a.file != b.file {
        return Err(MergeError::DifferentFiles(a.file.clone(), b.file.clone()));
    }
    if !line_disjoint(a, b) {
        return Err(MergeError::NotDisjoint(a.file.clone()));
    }
    let mut hunks: Vec<Hunk> = a.hunks.iter().chain(&b.hunks).cloned().collect();
    hunks.sort_by_key(|h| h.start_line);
    let merged = Diff::new(a.file.clone(), hunks);
    apply_diff(base, &merged)?;
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SemanticOutcome {
    Merged(Diff),
    Declined(String),
}

/// Asks the backend for a merge and accepts it only if it applies to `base`.
pub fn semantic_merge(a: &Diff, b: &Diff, base: &[String], backend: &mut dyn MergeBackend) -> SemanticOutcome {
    match backend.propose(a, b, base) {
        Ok(proposal) => {
            if proposal.file != a.file {
                return SemanticOutcome::Declined(format!(
                    "proposal targets `{}` instead of `{}`",
                    proposal.file, a.file
                ));
            }
            match apply_diff(base, &proposal) {
                Ok(_) => SemanticOutcome::Merged(proposal),
                Err(e) => SemanticOutcome::Declined(format!("proposal failed validation: {e}")),
            }
        }
        Err(e) => SemanticOutcome::Declined(e.to_string()),
    }
}

/// Two children whose change sets touch a common file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictPair {
    pub left: usize,
    pub right: usize,
    pub left_child: String,
    pub right_child: String,
    pub files: BTreeSet<String>,
}

/// Files a child's diffs touch.
pub fn touched_files(result: &ResumePackage) -> BTreeSet<String> {
    result.result.code_diff.iter().map(|d| d.file.clone()).collect()
}

/// All `i < j` pairs with overlapping file sets, in lexicographic order.
pub fn detect_conflicts(results: &[ResumePackage]) -> Vec<ConflictPair> {
    let touched: Vec<BTreeSet<String>> = results.iter().map(touched_files).collect();
    let mut pairs = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let files: BTreeSet<String> = touched[i].intersection(&touched[j]).cloned().collect();
            if !files.is_empty() {
                pairs.push(ConflictPair {
                    left: i,
                    right: j,
                    left_child: results[i].spawn_id.clone(),
                    right_child: results[j].spawn_id.clone(),
                    files,
                });
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Auto,
    Semantic,
    Escalated,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Auto => "auto",
            Tier::Semantic => "semantic",
            Tier::Escalated => "escalated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub pair: ConflictPair,
    pub tier: Tier,
    pub success: bool,
    pub semantic_attempted: bool,
    pub reason: Option<String>,
}

/// Overlapping hunks handed back to the parent for manual resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Escalation {
    pub pair: ConflictPair,
    pub file: String,
    pub left_hunks: Vec<Hunk>,
    pub right_hunks: Vec<Hunk>,
}

/// A resolved hunk that lost to an earlier resolution touching the same lines.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedHunk {
    pub file: String,
    pub hunk: Hunk,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Overlaps a hunk accepted from an earlier pair.
    Superseded,
    /// Does not match the base snapshot.
    Stale,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStats {
    pub auto: usize,
    pub semantic: usize,
    pub escalated: usize,
    pub semantic_attempts: usize,
}

impl MergeStats {
    pub fn total(&self) -> usize {
        self.auto + self.semantic + self.escalated
    }

    pub fn record(&mut self, r: &Resolution) {
        match r.tier {
            Tier::Auto => self.auto += 1,
            Tier::Semantic => self.semantic += 1,
            Tier::Escalated => self.escalated += 1,
        }
        if r.semantic_attempted {
            self.semantic_attempts += 1;
        }
    }

    pub fn absorb(&mut self, other: &MergeStats) {
        self.auto += other.auto;
        self.semantic += other.semantic;
        self.escalated += other.escalated;
        self.semantic_attempts += other.semantic_attempts;
    }

    /// (auto, semantic, escalated) fractions; `None` with no conflicts.
    pub fn rates(&self) -> Option<(f64, f64, f64)> {
        let n = self.total();
        (n > 0).then(|| {
            let n = n as f64;
            (self.auto as f64 / n, self.semantic as f64 / n, self.escalated as f64 / n)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeOutcome {
    /// One diff per file, sorted by path; each applies to the base snapshot.
    pub merged_diffs: Vec<Diff>,
    pub resolutions: Vec<Resolution>,
    pub escalations: Vec<Escalation>,
    pub dropped: Vec<DroppedHunk>,
    pub stats: MergeStats,
}

fn diffs_by_file(result: &ResumePackage) -> BTreeMap<String, Diff> {
    let mut out: BTreeMap<String, Diff> = BTreeMap::new();
    for d in &result.result.code_diff {
        out.entry(d.file.clone())
            .or_insert_with(|| Diff::empty(d.file.clone()))
            .hunks
            .extend(d.hunks.iter().cloned());
    }
    out.into_iter()
        .map(|(f, d)| (f, d.normalized()))
        .collect()
}

/// Runs the three-tier coherence protocol over concurrent child results.
///
/// Diffs to files only one child touched pass straight through. Conflicting
/// pairs are processed in `(i, j)` order: line-disjoint pairs auto-merge,
/// the rest go to the semantic backend, and pairs whose semantic merge is
/// declined escalate, keeping their overlapping hunks out of the result.
pub fn merge_results(
    results: &[ResumePackage],
    base_files: &BTreeMap<String, Vec<String>>,
    backend: &mut dyn MergeBackend,
) -> MergeOutcome {
    let empty: Vec<String> = Vec::new();
    let base_of = |f: &str| base_files.get(f).unwrap_or(&empty);
    let per_child: Vec<BTreeMap<String, Diff>> = results.iter().map(diffs_by_file).collect();
    let conflicts = detect_conflicts(results);

    let mut touched_by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, diffs) in per_child.iter().enumerate() {
        for f in diffs.keys() {
            touched_by.entry(f.as_str()).or_default().push(i);
        }
    }

    let mut contributions: BTreeMap<String, Vec<Hunk>> = BTreeMap::new();
    let mut excluded: BTreeMap<String, Vec<Hunk>> = BTreeMap::new();
    for (file, children) in &touched_by {
        if let [only] = children.as_slice() {
            contributions.insert(file.to_string(), per_child[*only][*file].hunks.clone());
        }
    }

    let mut outcome = MergeOutcome::default();
    for pair in conflicts {
        let mut merged_files: Vec<Diff> = Vec::new();
        let mut overlapping: Vec<&str> = Vec::new();
        for f in &pair.files {
            let (l, r) = (&per_child[pair.left][f], &per_child[pair.right][f]);
            if line_disjoint(l, r) {
                let mut hunks: Vec<Hunk> = l.hunks.iter().chain(&r.hunks).cloned().collect();
                hunks.sort_by_key(|h| h.start_line);
                merged_files.push(Diff::new(f.clone(), hunks));
            } else {
                overlapping.push(f);
            }
        }

        let resolution = if overlapping.is_empty() {
            Resolution {
                pair: pair.clone(),
                tier: Tier::Auto,
                success: true,
                semantic_attempted: false,
                reason: None,
            }
        } else {
            let mut proposals = Vec::new();
            let mut declined = None;
            for f in &overlapping {
                let (l, r) = (&per_child[pair.left][*f], &per_child[pair.right][*f]);
                match semantic_merge(l, r, base_of(f), backend) {
                    SemanticOutcome::Merged(d) => proposals.push(d),
                    SemanticOutcome::Declined(reason) => {
                        declined = Some(reason);
                        break;
                    }
                }
            }
            match declined {
                None => {
                    merged_files.extend(proposals);
                    Resolution {
                        pair: pair.clone(),
                        tier: Tier::Semantic,
                        success: true,
                        semantic_attempted: true,
                        reason: None,
                    }
                }
                Some(reason) => {
                    for f in &overlapping {
                        let (l, r) = (&per_child[pair.left][*f], &per_child[pair.right][*f]);
                        let (l_hot, l_cold) = split_overlapping(l, r);
                        let (r_hot, r_cold) = split_overlapping(r, l);
                        let mut cold: Vec<Hunk> = l_cold.into_iter().chain(r_cold).collect();
                        cold.sort_by_key(|h| h.start_line);
                        merged_files.push(Diff::new(f.to_string(), cold));
                        let ex = excluded.entry(f.to_string()).or_default();
                        ex.extend(l_hot.iter().cloned());
                        ex.extend(r_hot.iter().cloned());
                        outcome.escalations.push(Escalation {
                            pair: pair.clone(),
                            file: f.to_string(),
                            left_hunks: l_hot,
                            right_hunks: r_hot,
                        });
                    }
                    Resolution {
                        pair: pair.clone(),
                        tier: Tier::Escalated,
                        success: false,
                        semantic_attempted: true,
                        reason: Some(reason),
                    }
                }
            }
        };
        for d in merged_files {
            contributions.entry(d.file).or_default().extend(d.hunks);
        }
        outcome.stats.record(&resolution);
        outcome.resolutions.push(resolution);
    }

    for (file, hunks) in contributions {
        let base = base_of(&file);
        let banned = excluded.get(&file);
        let mut accepted: Vec<Hunk> = Vec::new();
        for h in hunks {
            if banned.is_some_and(|b| b.contains(&h)) || accepted.contains(&h) {
                continue;
            }
            let reason = if accepted.iter().any(|a| a.overlaps(&h)) {
                Some(DropReason::Superseded)
            } else if !h.applies_to(base) {
                Some(DropReason::Stale)
            } else {
                None
            };
            match reason {
                Some(reason) => outcome.dropped.push(DroppedHunk {
                    file: file.clone(),
                    hunk: h,
                    reason,
                }),
                None => accepted.push(h),
            }
        }
        if !accepted.is_empty() {
            accepted.sort_by_key(|h| h.start_line);
            outcome.merged_diffs.push(Diff::new(file, accepted));
        }
    }
    outcome
}

fn split_overlapping(this: &Diff, other: &Diff) -> (Vec<Hunk>, Vec<Hunk>) {
    this.hunks
        .iter()
        .cloned()
        .partition(|h| other.hunks.iter().any(|o| o.overlaps(h)))
}
