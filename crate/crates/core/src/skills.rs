//! Skills are prompt templates with named `{placeholder}` parameters.
//!
//! A parent hands children the skills whose template is similar enough to
//! the child task, children specialize them with task context, and skills a
//! child learned come back and are promoted into the parent library when the
//! child's success statistic clears the promotion threshold.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{cosine, Embedder};
use crate::protocol::TaskSpec;
use crate::scalar::{clamp_unit, Scalar};

pub const DEFAULT_INHERIT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_PROMOTE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkillError {
    #[error("skill `{id}` binds `{name}` which is not a placeholder of its template")]
    UnknownParam { id: String, name: String },
    #[error("skill `{0}` carries a success statistic but was not learned")]
    UnexpectedSuccessStat(String),
    #[error("skill `{id}` success statistic {value} outside [0, 1]")]
    SuccessStatOutOfRange { id: String, value: f64 },
    #[error("skill `{0}` has an unterminated or nested placeholder")]
    MalformedTemplate(String),
    #[error("duplicate skill id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    BuiltIn,
    Inherited,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skill {
    pub id: String,
    pub template: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_stat: Option<f64>,
}

impl Skill {
    pub fn built_in(id: impl Into<String>, template: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            template: template.into(),
            params: BTreeMap::new(),
            provenance: Provenance::BuiltIn,
            success_stat: None,
        }
    }

    pub fn learned(id: impl Into<String>, template: impl Into<String>, success_stat: Option<f64>) -> Self {
        Self {
            provenance: Provenance::Learned,
            success_stat,
            ..Self::built_in(id, template)
        }
    }

    pub fn placeholders(&self) -> Result<Vec<String>, SkillError> {
        placeholders(&self.template).ok_or_else(|| SkillError::MalformedTemplate(self.id.clone()))
    }

    pub fn validate(&self) -> Result<(), SkillError> {
        let names: BTreeSet<String> = self.placeholders()?.into_iter().collect();
        if let Some(name) = self.params.keys().find(|k| !names.contains(*k)) {
            return Err(SkillError::UnknownParam {
                id: self.id.clone(),
                name: name.clone(),
            });
        }
        if let Some(value) = self.success_stat {
            if self.provenance != Provenance::Learned {
                return Err(SkillError::UnexpectedSuccessStat(self.id.clone()));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(SkillError::SuccessStatOutOfRange {
                    id: self.id.clone(),
                    value,
                });
            }
        }
        Ok(())
    }

    /// Placeholders with no binding yet, in template order.
    pub fn unbound(&self) -> Vec<String> {
        placeholders(&self.template)
            .unwrap_or_default()
            .into_iter()
            .filter(|p| !self.params.contains_key(p))
            .collect()
    }

    /// Template with every bound placeholder substituted.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.template.len());
        let mut rest = self.template.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) => {
                    let name = &after[..close];
                    match self.params.get(name) {
                        Some(value) => out.push_str(value),
                        None => {
                            out.push('{');
                            out.push_str(name);
                            out.push('}');
                        }
                    }
                    rest = &after[close + 1..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Distinct placeholder names in order of first appearance, or `None` when a
/// brace is unbalanced or placeholders nest.
pub fn placeholders(template: &str) -> Option<Vec<String>> {
    let mut names = Vec::new();
    let mut current: Option<String> = None;
    for c in template.chars() {
        match (c, current.as_mut()) {
            ('{', None) => current = Some(String::new()),
            ('{', Some(_)) => return None,
            ('}', None) => return None,
            ('}', Some(name)) => {
                if name.is_empty() {
                    return None;
                }
                if !names.contains(name) {
                    names.push(std::mem::take(name));
                }
                current = None;
            }
            (c, Some(name)) => name.push(c),
            (_, None) => {}
        }
    }
    current.is_none().then_some(names)
}

/// Cosine similarity of the embedded template and task description, clamped to `[0, 1]`.
pub fn skill_relevance<S: Scalar>(skill: &Skill, task: &TaskSpec, embedder: &dyn Embedder<S>) -> S {
    let s = embedder.embed(&skill.template);
    let t = embedder.embed(&task.description);
    clamp_unit(cosine(&s.values, &t.values))
}

/// Result of [`specialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Specialized {
    pub skill: Skill,
    /// Placeholders still unbound after applying the context.
    pub unbound: Vec<String>,
}

/// Binds context entries whose keys name template placeholders. Other keys
/// are ignored and existing bindings for keys absent from `context` stay.
pub fn specialize(skill: &Skill, task_context: &BTreeMap<String, String>) -> Specialized {
    let names = placeholders(&skill.template).unwrap_or_default();
    let mut skill = skill.clone();
    for name in &names {
        if let Some(value) = task_context.get(name) {
            skill.params.insert(name.clone(), value.clone());
        }
    }
    let unbound = skill.unbound();
    Specialized { skill, unbound }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillLibrary {
    skills: Vec<Skill>,
    pub inherit_threshold: f64,
}

impl Default for SkillLibrary {
    fn default() -> Self {
        Self::new(DEFAULT_INHERIT_THRESHOLD)
    }
}

/// A learned skill that was not promoted, and why.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSkill {
    pub id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    MissingSuccessStat,
    BelowThreshold { success_stat: f64, threshold: f64 },
    Invalid(SkillError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromotionReport {
    /// Ids assigned in the parent library, in promotion order.
    pub promoted: Vec<String>,
    pub skipped: Vec<SkippedSkill>,
}

impl PromotionReport {
    pub fn promoted_count(&self) -> usize {
        self.promoted.len()
    }

    /// Skills skipped for lacking a success statistic.
    pub fn warnings(&self) -> impl Iterator<Item = &SkippedSkill> {
        self.skipped
            .iter()
            .filter(|s| s.reason == SkipReason::MissingSuccessStat)
    }
}

impl SkillLibrary {
    pub fn new(inherit_threshold: f64) -> Self {
        Self {
            skills: Vec::new(),
            inherit_threshold,
        }
    }

    pub fn with_skills(inherit_threshold: f64, skills: impl IntoIterator<Item = Skill>) -> Result<Self, SkillError> {
        let mut lib = Self::new(inherit_threshold);
        for s in skills {
            lib.add(s)?;
        }
        Ok(lib)
    }

    pub fn add(&mut self, skill: Skill) -> Result<(), SkillError> {
        skill.validate()?;
        if self.get(&skill.id).is_some() {
            return Err(SkillError::DuplicateId(skill.id));
        }
        self.skills.push(skill);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Skill> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn skills(&self) -> &[Skill] {
        &self.skills
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    /// Copies of every skill with relevance strictly above the inherit
    /// threshold, marked as inherited. Library order is kept.
    pub fn select_inherited<S: Scalar>(&self, task: &TaskSpec, embedder: &dyn Embedder<S>) -> Vec<Skill> {
        let threshold = S::lit(self.inherit_threshold);
        let task_emb = embedder.embed(&task.description);
        self.skills
            .iter()
            .filter(|s| {
                let e = embedder.embed(&s.template);
                clamp_unit(cosine(&e.values, &task_emb.values)) > threshold
            })
            .map(|s| Skill {
                provenance: Provenance::Inherited,
                success_stat: None,
                ..s.clone()
            })
            .collect()
    }

    /// Appends learned skills whose success statistic is at least
    /// `promote_threshold`. Colliding ids get a numeric suffix; existing
    /// skills are never modified.
    pub fn promote(&mut self, learned: &[Skill], promote_threshold: f64) -> PromotionReport {
        let mut report = PromotionReport::default();
        for skill in learned {
            let Some(stat) = skill.success_stat else {
                report.skipped.push(SkippedSkill {
                    id: skill.id.clone(),
                    reason: SkipReason::MissingSuccessStat,
                });
                continue;
            };
            if stat < promote_threshold {
                report.skipped.push(SkippedSkill {
                    id: skill.id.clone(),
                    reason: SkipReason::BelowThreshold {
                        success_stat: stat,
                        threshold: promote_threshold,
                    },
                });
                continue;
            }
            let mut promoted = Skill {
                provenance: Provenance::Learned,
                ..skill.clone()
            };
            if let Err(e) = promoted.validate() {
                report.skipped.push(SkippedSkill {
                    id: skill.id.clone(),
                    reason: SkipReason::Invalid(e),
                });
                continue;
            }
            promoted.id = self.fresh_id(&skill.id);
            report.promoted.push(promoted.id.clone());
            self.skills.push(promoted);
        }
        report
    }

    fn fresh_id(&self, base: &str) -> String {
        if self.get(base).is_none() {
            return base.to_string();
        }
        (2..)
            .map(|n| format!("{base}-{n}"))
            .find(|id| self.get(id).is_none())
            .expect("unbounded suffix search")
    }
}

/// Inheritance as a free function over a library.
pub fn select_inherited_skills<S: Scalar>(
    library: &SkillLibrary,
    task: &TaskSpec,
    embedder: &dyn Embedder<S>,
) -> Vec<Skill> {
    library.select_inherited(task, embedder)
}

/// Promotion as a free function; returns the report, the library is updated in place.
pub fn promote_skills(library: &mut SkillLibrary, learned: &[Skill], promote_threshold: f64) -> PromotionReport {
    library.promote(learned, promote_threshold)
}
