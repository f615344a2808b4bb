use std::collections::BTreeSet;
use std::fmt;

use super::{ResumePackage, SpawnPackage};

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    WrongChild { expected: String, got: String },
    FilesModifiedMismatch { missing: Vec<String>, extra: Vec<String> },
    DuplicateFileDiff(String),
    MalformedDiff(String),
    TestPassRateOutOfRange(f64),
    NegativeExecutionTime(f64),
    TraceNotIncreasing { index: usize },
    InvalidSkill { id: String, message: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::WrongChild { expected, got } => {
                write!(f, "wrong child: expected `{expected}`, got `{got}`")
            }
            ValidationIssue::FilesModifiedMismatch { missing, extra } => write!(
                f,
                "files_modified disagrees with code_diff (missing {missing:?}, extra {extra:?})"
            ),
            ValidationIssue::DuplicateFileDiff(file) => write!(f, "more than one diff for `{file}`"),
            ValidationIssue::MalformedDiff(file) => write!(f, "diff for `{file}` has unsorted or overlapping hunks"),
            ValidationIssue::TestPassRateOutOfRange(v) => write!(f, "test_pass_rate {v} outside [0, 1]"),
            ValidationIssue::NegativeExecutionTime(v) => write!(f, "execution_time {v} is negative or not finite"),
            ValidationIssue::TraceNotIncreasing { index } => write!(f, "trace steps not increasing at index {index}"),
            ValidationIssue::InvalidSkill { id, message } => write!(f, "learned skill `{id}` invalid: {message}"),
        }
    }
}

/// Checks a child's result against the package it was spawned with.
/// Every problem found is reported; nothing is mutated.
pub fn validate_resume(resume: &ResumePackage, spawn: &SpawnPackage) -> Result<(), Vec<ValidationIssue>> {
    let mut issues = Vec::new();
    if resume.spawn_id != spawn.spawn_id {
        issues.push(ValidationIssue::WrongChild {
            expected: spawn.spawn_id.clone(),
            got: resume.spawn_id.clone(),
        });
    }

    let mut diffed = BTreeSet::new();
    for d in &resume.result.code_diff {
        if !diffed.insert(d.file.clone()) {
            issues.push(ValidationIssue::DuplicateFileDiff(d.file.clone()));
        }
        if !d.is_well_formed() {
            issues.push(ValidationIssue::MalformedDiff(d.file.clone()));
        }
    }
    let listed: BTreeSet<String> = resume.result.files_modified.iter().cloned().collect();
    let missing: Vec<String> = diffed.difference(&listed).cloned().collect();
    let extra: Vec<String> = listed.difference(&diffed).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        issues.push(ValidationIssue::FilesModifiedMismatch { missing, extra });
    }

    let rate = resume.metrics.test_pass_rate;
    if !(0.0..=1.0).contains(&rate) {
        issues.push(ValidationIssue::TestPassRateOutOfRange(rate));
    }
    if !(resume.execution_time.is_finite() && resume.execution_time >= 0.0) {
        issues.push(ValidationIssue::NegativeExecutionTime(resume.execution_time));
    }
    if let Some(i) = resume.trace.windows(2).position(|w| w[1].step <= w[0].step) {
        issues.push(ValidationIssue::TraceNotIncreasing { index: i + 1 });
    }
    for s in &resume.skills_learned {
        if let Err(e) = s.validate() {
            issues.push(ValidationIssue::InvalidSkill {
                id: s.id.clone(),
                message: e.to_string(),
            });
        }
    }

    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}
