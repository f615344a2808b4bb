//! Tiered agent memory, relevance scoring and slicing.
//!
//! A [`MemoryStore`] holds episodic, semantic and working items. When a
//! child is spawned the parent scores every item against the child's task
//! and copies the ones scoring strictly above the memory threshold into a
//! [`MemorySlice`].

mod embed;
mod relevance;
mod text;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use embed::{cosine, default_embed, fnv1a, token_bucket, Embedder, Embedding, HashEmbedder};
pub use relevance::{
    compute_relevance, slice_memory, RelevanceComponents, RelevanceWeights, TaskProfile,
};
pub use text::{content_tokens, extract_keywords, path_like_tokens, raw_tokens, word_count};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("duplicate memory item id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}` has embedding dimension {got}, store expects {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("item `{id}` was created at step {created} which is after the current step {now}")]
    FromFuture { id: String, created: u64, now: u64 },
    #[error("item `{id}` embedding is neither unit length nor zero")]
    NotNormalized { id: String },
    #[error("relevance weights invalid: {0}")]
    InvalidWeights(String),
    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f64),
}

/// Memory tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Conversation turns and code events.
    Episodic,
    /// Codebase structure and API knowledge.
    Semantic,
    /// Current file context and live variables.
    Working,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Episodic, Tier::Semantic, Tier::Working];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Episodic => "episodic",
            Tier::Semantic => "semantic",
            Tier::Working => "working",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct MemoryItem<S> {
    pub id: String,
    pub tier: Tier,
    pub content: String,
    #[serde(default)]
    pub referenced_files: BTreeSet<String>,
    #[serde(default)]
    pub referenced_symbols: BTreeSet<String>,
    pub created_at_step: u64,
    /// Unit-norm, or all zeros when the content had no tokens.
    pub embedding: Vec<S>,
}

impl<S: Scalar> MemoryItem<S> {
    /// Builds an item whose embedding is computed from `content`.
    pub fn new(
        id: impl Into<String>,
        tier: Tier,
        content: impl Into<String>,
        created_at_step: u64,
        embedder: &dyn Embedder<S>,
    ) -> Self {
        let content = content.into();
        let embedding = embedder.embed(&content).into_values();
        Self {
            id: id.into(),
            tier,
            content,
            referenced_files: BTreeSet::new(),
            referenced_symbols: BTreeSet::new(),
            created_at_step,
            embedding,
        }
    }

    pub fn with_files<I, T>(mut self, files: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        self.referenced_files
            .extend(files.into_iter().map(Into::into));
        self
    }

    pub fn with_symbols<I, T>(mut self, symbols: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        self.referenced_symbols
            .extend(symbols.into_iter().map(Into::into));
        self
    }

    pub fn word_count(&self) -> usize {
        word_count(&self.content)
    }

    fn check_embedding(&self, dim: usize) -> Result<(), MemoryError> {
        if self.embedding.len() != dim {
            return Err(MemoryError::DimensionMismatch {
                id: self.id.clone(),
                expected: dim,
                got: self.embedding.len(),
            });
        }
        let norm = embed::l2_norm(&self.embedding);
        let unit = (norm - S::one()).abs() <= S::lit(1e-4);
        if !(unit || norm == S::zero()) {
            return Err(MemoryError::NotNormalized {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

/// Single-writer tiered store. Items keep insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct MemoryStore<S> {
    items: Vec<MemoryItem<S>>,
    current_step: u64,
    embedding_dim: usize,
}

impl<S: Scalar> MemoryStore<S> {
    pub fn new(embedding_dim: usize) -> Self {
        assert!(embedding_dim > 0, "embedding dimension must be positive");
        Self {
            items: Vec::new(),
            current_step: 0,
            embedding_dim,
        }
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.current_step = self.current_step.max(step);
        self
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn current_step(&self) -> u64 {
        self.current_step
    }

    /// Moves the step counter forward by one and returns the new value.
    pub fn advance_step(&mut self) -> u64 {
        self.current_step += 1;
        self.current_step
    }

    pub fn insert(&mut self, item: MemoryItem<S>) -> Result<(), MemoryError> {
        if self.items.iter().any(|m| m.id == item.id) {
            return Err(MemoryError::DuplicateId(item.id));
        }
        if item.created_at_step > self.current_step {
            return Err(MemoryError::FromFuture {
                id: item.id,
                created: item.created_at_step,
                now: self.current_step,
            });
        }
        item.check_embedding(self.embedding_dim)?;
        self.items.push(item);
        Ok(())
    }

    pub fn items(&self) -> &[MemoryItem<S>] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&MemoryItem<S>> {
        self.items.iter().find(|m| m.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn tier(&self, tier: Tier) -> impl Iterator<Item = &MemoryItem<S>> {
        self.items.iter().filter(move |m| m.tier == tier)
    }

    pub fn tier_len(&self, tier: Tier) -> usize {
        self.tier(tier).count()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Deep copy handed to children. Later writes to either side are invisible
    /// to the other.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn token_count(&self) -> usize {
        count_tokens(&self.items)
    }

    /// Re-checks every store invariant. Used after deserializing a store.
    pub fn validate(&self) -> Result<(), MemoryError> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(MemoryError::DuplicateId(item.id.clone()));
            }
            if item.created_at_step > self.current_step {
                return Err(MemoryError::FromFuture {
                    id: item.id.clone(),
                    created: item.created_at_step,
                    now: self.current_step,
                });
            }
            item.check_embedding(self.embedding_dim)?;
        }
        Ok(())
    }
}

/// Items copied out of a store for one child task.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlice<S> {
    pub items: Vec<MemoryItem<S>>,
    pub source_store_step: u64,
    pub threshold_used: S,
}

impl<S: Scalar> MemorySlice<S> {
    pub fn empty(source_store_step: u64, threshold_used: S) -> Self {
        Self {
            items: Vec::new(),
            source_store_step,
            threshold_used,
        }
    }

    pub fn tier(&self, tier: Tier) -> impl Iterator<Item = &MemoryItem<S>> {
        self.items.iter().filter(move |m| m.tier == tier)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn token_count(&self) -> usize {
        count_tokens(&self.items)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|m| m.id.as_str())
    }
}

/// Sum of whitespace word counts over item contents.
pub fn count_tokens<'a, S: Scalar, I>(items: I) -> usize
where
    I: IntoIterator<Item = &'a MemoryItem<S>>,
{
    items.into_iter().map(MemoryItem::word_count).sum()
}

/// Fractional reduction `1 - sliced / parent`; zero for an empty parent.
pub fn reduction_ratio(parent_tokens: usize, sliced_tokens: usize) -> f64 {
    if parent_tokens == 0 {
        0.0
    } else {
        1.0 - sliced_tokens as f64 / parent_tokens as f64
    }
}
