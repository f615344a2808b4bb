//! Deterministic hashed bag-of-tokens embeddings.

use crate::scalar::Scalar;

use super::text::content_tokens;

/// An embedding vector plus a flag for inputs that produced no tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S> {
    pub values: Vec<S>,
    /// Set when the text had no content tokens; `values` is then all zeros.
    pub degenerate: bool,
}

impl<S: Scalar> Embedding<S> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }
}

/// Maps text to a fixed-dimension vector.
pub trait Embedder<S: Scalar> {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Embedding<S>;
}

/// The bundled embedder: FNV-1a token hashing into `dim` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    /// # Panics
    /// If `dim` is zero.
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl<S: Scalar> Embedder<S> for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Embedding<S> {
        default_embed(text, self.dim)
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Bucket a token hashes into for a given dimension.
pub fn token_bucket(token: &str, dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % dim as u64) as usize
}

/// Hashed bag-of-tokens embedding, L2-normalized.
///
/// Each content token adds `+1` to bucket `fnv1a(token) mod dim`. Text with
/// no content tokens yields the zero vector with `degenerate` set.
///
/// # Panics
/// If `dim` is zero.
pub fn default_embed<S: Scalar>(text: &str, dim: usize) -> Embedding<S> {
    assert!(dim > 0, "embedding dimension must be positive");
    let mut counts = vec![0u32; dim];
    for token in content_tokens(text) {
        counts[token_bucket(&token, dim)] += 1;
    }
    let norm = counts
        .iter()
        .map(|&c| f64::from(c) * f64::from(c))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Embedding {
            values: vec![S::zero(); dim],
            degenerate: true,
        };
    }
    Embedding {
        values: counts
            .into_iter()
            .map(|c| S::lit(f64::from(c) / norm))
            .collect(),
        degenerate: false,
    }
}

/// Cosine similarity; zero when either vector has zero norm or the lengths differ.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    if a.len() != b.len() {
        return S::zero();
    }
    let (mut dot, mut na, mut nb) = (S::zero(), S::zero(), S::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub(crate) fn l2_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit() {
        let a: Embedding<f64> = default_embed("refactor the json parser module", 64);
        let b: Embedding<f64> = default_embed("refactor the json parser module", 64);
        assert_eq!(a, b);
        assert!(!a.degenerate);
        assert!((l2_norm(&a.values) - 1.0).abs() < 1e-12);
        assert!(a.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn self_similarity_is_one() {
        let a: Embedding<f64> = default_embed("lexer tokens overflow", 32);
        assert!((cosine(&a.values, &a.values) - 1.0).abs() < 1e-12);
        let f: Embedding<f32> = default_embed("lexer tokens overflow", 32);
        assert!((cosine(&f.values, &f.values) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_text_is_degenerate() {
        let e: Embedding<f64> = default_embed("", 16);
        assert!(e.degenerate);
        assert!(e.values.iter().all(|&v| v == 0.0));
        let stop: Embedding<f64> = default_embed("the and of", 16);
        assert!(stop.degenerate);
        assert_eq!(cosine(&e.values, &e.values), 0.0);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn disjoint_buckets_have_zero_cosine() {
        // Oracle: search small vocabularies for token pairs whose buckets are
        // pairwise distinct, then check the embedder agrees.
        let dim = 64;
        let vocab = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "theta", "kappa"];
        let mut found = 0;
        for a in 0..vocab.len() {
            for b in a + 1..vocab.len() {
                for c in 0..vocab.len() {
                    for d in c + 1..vocab.len() {
                        let left = [token_bucket(vocab[a], dim), token_bucket(vocab[b], dim)];
                        let right = [token_bucket(vocab[c], dim), token_bucket(vocab[d], dim)];
                        if left.iter().any(|x| right.contains(x)) {
                            continue;
                        }
                        let l: Embedding<f64> =
                            default_embed(&format!("{} {}", vocab[a], vocab[b]), dim);
                        let r: Embedding<f64> =
                            default_embed(&format!("{} {}", vocab[c], vocab[d]), dim);
                        assert_eq!(cosine(&l.values, &r.values), 0.0);
                        found += 1;
                    }
                }
            }
        }
        assert!(found > 0);
    }
}
