//! Tokenization shared by keyword matching and the hashed embedder.

use std::collections::BTreeSet;

/// Fixed English stopword list. Sorted so membership is a binary search.
const STOPWORDS: &[&str] = &[
    "about", "above", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from",
    "further", "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how",
    "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my", "no",
    "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "out",
    "over", "own", "same", "she", "should", "so", "some", "such", "than", "that", "the", "their",
    "them", "then", "there", "these", "they", "this", "those", "through", "to", "too", "under",
    "until", "up", "very", "was", "we", "were", "what", "when", "where", "which", "while", "who",
    "whom", "why", "will", "with", "would", "you", "your",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercased runs of alphanumeric characters, in order, duplicates kept.
pub fn raw_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Tokens that count as content words: length >= 2 and not a stopword.
pub fn content_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    raw_tokens(text).filter(|t| t.chars().count() >= 2 && !is_stopword(t))
}

/// Keyword set of a task description.
///
/// ```
/// use agentspawn::memory::extract_keywords;
/// let k = extract_keywords("Fix the JSON parser");
/// assert_eq!(k.into_iter().collect::<Vec<_>>(), ["fix", "json", "parser"]);
/// ```
pub fn extract_keywords(task_description: &str) -> BTreeSet<String> {
    content_tokens(task_description).collect()
}

/// Whitespace-delimited tokens of `text` that look like file paths: they
/// contain a `/`, or end in a `.ext` suffix made of ASCII alphanumerics.
/// Surrounding punctuation such as quotes, brackets and trailing commas is
/// stripped first.
pub fn path_like_tokens(text: &str) -> BTreeSet<String> {
    const TRIM: &[char] = &[
        '"', '\'', '`', '(', ')', '[', ']', '{', '}', '<', '>', ',', ';', ':', '!', '?',
    ];
    text.split_whitespace()
        .map(|w| w.trim_matches(TRIM).trim_end_matches('.'))
        .filter(|w| is_path_like(w))
        .map(str::to_string)
        .collect()
}

fn is_path_like(word: &str) -> bool {
    if word.is_empty()
        || !word
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '/' | '.' | '_' | '-'))
    {
        return false;
    }
    if word.contains('/') {
        return word.chars().any(char::is_alphanumeric);
    }
    match word.rsplit_once('.') {
        Some((stem, ext)) => {
            !stem.is_empty()
                && (1..=8).contains(&ext.len())
                && ext.chars().all(|c| c.is_ascii_alphanumeric())
                && ext.chars().any(|c| c.is_ascii_alphabetic())
        }
        None => false,
    }
}

/// Whitespace word count used for memory size accounting.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
