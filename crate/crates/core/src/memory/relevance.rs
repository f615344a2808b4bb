use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::protocol::TaskSpec;
use crate::scalar::{clamp_unit, Scalar};

use super::embed::{cosine, Embedder};
use super::text::{content_tokens, extract_keywords, path_like_tokens};
use super::{MemoryError, MemoryItem, MemorySlice, MemoryStore};

/// Weights of the four relevance components plus the recency decay rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RelevanceWeights<S> {
    pub alpha: S,
    pub beta: S,
    pub gamma: S,
    /// Semantic weight. Named apart from the spawn threshold.
    pub delta_w: S,
    /// Per-step decay rate of the temporal component.
    pub lambda_decay: S,
}

impl<S: Scalar> RelevanceWeights<S> {
    pub fn new(alpha: S, beta: S, gamma: S, delta_w: S, lambda_decay: S) -> Result<Self, MemoryError> {
        let w = Self {
            alpha,
            beta,
            gamma,
            delta_w,
            lambda_decay,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        let parts = [self.alpha, self.beta, self.gamma, self.delta_w];
        if parts
            .iter()
            .any(|&w| !w.is_finite() || w < S::zero() || w > S::one())
        {
            return Err(MemoryError::InvalidWeights(
                "each weight must lie in [0, 1]".into(),
            ));
        }
        let sum = parts.iter().fold(S::zero(), |a, &b| a + b);
        if (sum - S::one()).abs() > S::weight_tolerance() {
            return Err(MemoryError::InvalidWeights(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        if !(self.lambda_decay.is_finite() && self.lambda_decay > S::zero()) {
            return Err(MemoryError::InvalidWeights(
                "lambda_decay must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn combine(&self, c: &RelevanceComponents<S>) -> S {
        self.alpha * c.keyword + self.beta * c.dependency + self.gamma * c.temporal + self.delta_w * c.semantic
    }
}

impl<S: Scalar> Default for RelevanceWeights<S> {
    /// 0.3 / 0.3 / 0.2 / 0.2 with a decay of 0.1 per step.
    fn default() -> Self {
        Self {
            alpha: S::lit(0.3),
            beta: S::lit(0.3),
            gamma: S::lit(0.2),
            delta_w: S::lit(0.2),
            lambda_decay: S::lit(0.1),
        }
    }
}

/// The four per-item scores, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceComponents<S> {
    pub keyword: S,
    pub dependency: S,
    pub temporal: S,
    pub semantic: S,
}

/// A task preprocessed for scoring many items: keywords, referenced files
/// and symbols, and the task embedding are computed once.
#[derive(Debug, Clone)]
pub struct TaskProfile<S> {
    pub keywords: BTreeSet<String>,
    pub files: BTreeSet<String>,
    pub symbols: BTreeSet<String>,
    pub embedding: Vec<S>,
}

impl<S: Scalar> TaskProfile<S> {
    pub fn new(task: &TaskSpec, embedder: &dyn Embedder<S>) -> Self {
        let mut files = task.referenced_files.clone();
        files.extend(path_like_tokens(&task.description));
        Self {
            keywords: extract_keywords(&task.description),
            files,
            symbols: task.referenced_symbols.clone(),
            embedding: embedder.embed(&task.description).into_values(),
        }
    }

    pub fn components(
        &self,
        item: &MemoryItem<S>,
        lambda_decay: S,
        now_step: u64,
    ) -> Result<RelevanceComponents<S>, MemoryError> {
        if item.embedding.len() != self.embedding.len() {
            return Err(MemoryError::DimensionMismatch {
                id: item.id.clone(),
                expected: self.embedding.len(),
                got: item.embedding.len(),
            });
        }
        if item.created_at_step > now_step {
            return Err(MemoryError::FromFuture {
                id: item.id.clone(),
                created: item.created_at_step,
                now: now_step,
            });
        }

        let keyword = if self.keywords.is_empty() {
            S::zero()
        } else {
            let tokens: BTreeSet<String> = content_tokens(&item.content).collect();
            let hits = self.keywords.intersection(&tokens).count();
            ratio(hits, self.keywords.len())
        };

        let task_refs = self.files.len() + self.symbols.len();
        let dependency = if task_refs == 0 {
            S::zero()
        } else {
            let hits = self.files.intersection(&item.referenced_files).count()
                + self.symbols.intersection(&item.referenced_symbols).count();
            ratio(hits, task_refs)
        };

        let age = S::lit((now_step - item.created_at_step) as f64);
        let temporal = (-(lambda_decay * age)).exp();
        let semantic = clamp_unit(cosine(&item.embedding, &self.embedding));

        Ok(RelevanceComponents {
            keyword,
            dependency,
            temporal,
            semantic,
        })
    }

    pub fn relevance(
        &self,
        item: &MemoryItem<S>,
        weights: &RelevanceWeights<S>,
        now_step: u64,
    ) -> Result<S, MemoryError> {
        let c = self.components(item, weights.lambda_decay, now_step)?;
        Ok(clamp_unit(weights.combine(&c)))
    }
}

fn ratio<S: Scalar>(num: usize, den: usize) -> S {
    S::lit(num as f64) / S::lit(den as f64)
}

/// Relevance of one item to a task, in `[0, 1]`.
pub fn compute_relevance<S: Scalar>(
    item: &MemoryItem<S>,
    task: &TaskSpec,
    weights: &RelevanceWeights<S>,
    now_step: u64,
    embedder: &dyn Embedder<S>,
) -> Result<S, MemoryError> {
    TaskProfile::new(task, embedder).relevance(item, weights, now_step)
}

/// Copies every item whose relevance is strictly above `threshold`.
///
/// Relevance is evaluated at the store's current step. Store order is kept.
pub fn slice_memory<S: Scalar>(
    store: &MemoryStore<S>,
    task: &TaskSpec,
    threshold: S,
    weights: &RelevanceWeights<S>,
    embedder: &dyn Embedder<S>,
) -> Result<MemorySlice<S>, MemoryError> {
    if !(threshold >= S::zero() && threshold <= S::one()) {
        return Err(MemoryError::ThresholdOutOfRange(threshold.as_f64()));
    }
    if embedder.dim() != store.embedding_dim() {
        return Err(MemoryError::DimensionMismatch {
            id: "<embedder>".into(),
            expected: store.embedding_dim(),
            got: embedder.dim(),
        });
    }
    let profile = TaskProfile::new(task, embedder);
    let now = store.current_step();
    let mut items = Vec::new();
    for item in store.items() {
        if profile.relevance(item, weights, now)? > threshold {
            items.push(item.clone());
        }
    }
    Ok(MemorySlice {
        items,
        source_store_step: now,
        threshold_used: threshold,
    })
}
