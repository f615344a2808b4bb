use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One contiguous edit against the base file.
///
/// `start_line` is 1-based. The replaced span is
/// `[start_line, start_line + old_lines.len())`; an empty `old_lines` is a
/// pure insertion before `start_line` and occupies that single position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hunk {
    pub start_line: usize,
    #[serde(default)]
    pub old_lines: Vec<String>,
    #[serde(default)]
    pub new_lines: Vec<String>,
}

impl Hunk {
    pub fn new<I, J, A, B>(start_line: usize, old_lines: I, new_lines: J) -> Self
    where
        I: IntoIterator<Item = A>,
        J: IntoIterator<Item = B>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            start_line,
            old_lines: old_lines.into_iter().map(Into::into).collect(),
            new_lines: new_lines.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_insertion(&self) -> bool {
        self.old_lines.is_empty()
    }

    /// Closed interval of base positions this hunk occupies.
    pub fn occupied(&self) -> (usize, usize) {
        if self.old_lines.is_empty() {
            (self.start_line, self.start_line)
        } else {
            (self.start_line, self.start_line + self.old_lines.len() - 1)
        }
    }

    pub fn overlaps(&self, other: &Hunk) -> bool {
        let (a0, a1) = self.occupied();
        let (b0, b1) = other.occupied();
        a0 <= b1 && b0 <= a1
    }

    /// Net change in line count when applied.
    pub fn line_delta(&self) -> isize {
        self.new_lines.len() as isize - self.old_lines.len() as isize
    }

    /// Whether `old_lines` match `base` at `start_line`.
    pub fn applies_to(&self, base: &[String]) -> bool {
        self.check(base, 0).is_ok()
    }

    fn check(&self, base: &[String], index: usize) -> Result<(), ApplyError> {
        let start = self.start_line;
        let end = start.saturating_sub(1) + self.old_lines.len();
        let in_range = start >= 1
            && if self.is_insertion() {
                start <= base.len() + 1
            } else {
                end <= base.len()
            };
        if !in_range {
            return Err(ApplyError::OutOfRange {
                hunk: index,
                start_line: start,
                base_len: base.len(),
            });
        }
        if let Some(offset) = self
            .old_lines
            .iter()
            .zip(&base[start - 1..end])
            .position(|(want, got)| want != got)
        {
            return Err(ApplyError::ContextMismatch {
                hunk: index,
                line: start + offset,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("hunk {hunk}: line {line} does not match the base content")]
    ContextMismatch { hunk: usize, line: usize },
    #[error("hunk {hunk}: start line {start_line} outside base of {base_len} lines")]
    OutOfRange {
        hunk: usize,
        start_line: usize,
        base_len: usize,
    },
    #[error("diff for `{0}` has unsorted or overlapping hunks")]
    Malformed(String),
}

/// Edits to one file, hunks sorted and pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diff {
    pub file: String,
    #[serde(default)]
    pub hunks: Vec<Hunk>,
}

impl Diff {
    pub fn new(file: impl Into<String>, hunks: Vec<Hunk>) -> Self {
        Self {
            file: file.into(),
            hunks,
        }
    }

    pub fn empty(file: impl Into<String>) -> Self {
        Self::new(file, Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.hunks.is_empty()
    }

    /// Sorted by start line, no two hunks overlapping, start lines positive.
    pub fn is_well_formed(&self) -> bool {
        self.hunks.iter().all(|h| h.start_line >= 1)
            && self
                .hunks
                .windows(2)
                .all(|w| w[0].start_line < w[1].start_line && !w[0].overlaps(&w[1]))
    }

    /// Sorts hunks by start line. Does not repair overlaps.
    pub fn normalized(mut self) -> Self {
        self.hunks.sort_by_key(|h| h.start_line);
        self
    }
}

/// Applies `diff` to `base`, back to front so earlier line numbers stay valid.
pub fn apply_diff(base: &[String], diff: &Diff) -> Result<Vec<String>, ApplyError> {
    if !diff.is_well_formed() {
        return Err(ApplyError::Malformed(diff.file.clone()));
    }
    for (i, h) in diff.hunks.iter().enumerate() {
        h.check(base, i)?;
    }
    let mut out = base.to_vec();
    for h in diff.hunks.iter().rev() {
        let start = h.start_line - 1;
        out.splice(start..start + h.old_lines.len(), h.new_lines.iter().cloned());
    }
    Ok(out)
}

/// Renders diffs as unified-diff text without context lines.
pub fn format_unified(diffs: &[Diff]) -> String {
    let mut out = String::new();
    for d in diffs {
        let _ = writeln!(out, "--- a/{}", d.file);
        let _ = writeln!(out, "+++ b/{}", d.file);
        let mut shift: isize = 0;
        for h in &d.hunks {
            let old_start = if h.is_insertion() { h.start_line - 1 } else { h.start_line };
            let new_start = (h.start_line as isize + shift) as usize;
            let new_start = if h.new_lines.is_empty() { new_start - 1 } else { new_start };
            let _ = writeln!(
                out,
                "@@ -{},{} +{},{} @@",
                old_start,
                h.old_lines.len(),
                new_start,
                h.new_lines.len()
            );
            for l in &h.old_lines {
                let _ = writeln!(out, "-{l}");
            }
            for l in &h.new_lines {
                let _ = writeln!(out, "+{l}");
            }
            shift += h.line_delta();
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unified diff line {line}: {message}")]
pub struct ParseDiffError {
    pub line: usize,
    pub message: String,
}

/// Parses unified-diff text. Context lines (` `) become part of both the
/// old and new side of their hunk.
pub fn parse_unified(text: &str) -> Result<Vec<Diff>, ParseDiffError> {
    let err = |line: usize, message: &str| ParseDiffError {
        line: line + 1,
        message: message.to_string(),
    };
    let mut diffs: Vec<Diff> = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((n, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        if let Some(old) = line.strip_prefix("--- ") {
            let (m, plus) = lines.next().ok_or_else(|| err(n, "missing +++ header"))?;
            let new = plus
                .strip_prefix("+++ ")
                .ok_or_else(|| err(m, "expected +++ header"))?;
            let path = strip_side(new).or_else(|| strip_side(old)).unwrap_or(new);
            diffs.push(Diff::empty(path));
            continue;
        }
        let Some(header) = line.strip_prefix("@@ ") else {
            return Err(err(n, "expected file header or hunk header"));
        };
        let diff = diffs.last_mut().ok_or_else(|| err(n, "hunk before file header"))?;
        let (old_start, old_count) = parse_range(header, '-').ok_or_else(|| err(n, "bad hunk header"))?;
        let mut hunk = Hunk {
            start_line: if old_count == 0 { old_start + 1 } else { old_start },
            old_lines: Vec::new(),
            new_lines: Vec::new(),
        };
        while let Some(&(_, body)) = lines.peek() {
            if let Some(l) = body.strip_prefix('-').filter(|_| !body.starts_with("--- ")) {
                hunk.old_lines.push(l.to_string());
            } else if let Some(l) = body.strip_prefix('+').filter(|_| !body.starts_with("+++ ")) {
                hunk.new_lines.push(l.to_string());
            } else if let Some(l) = body.strip_prefix(' ') {
                hunk.old_lines.push(l.to_string());
                hunk.new_lines.push(l.to_string());
            } else {
                break;
            }
            lines.next();
        }
        if hunk.old_lines.len() != old_count {
            return Err(err(n, "hunk body does not match its old line count"));
        }
        diff.hunks.push(hunk);
    }
    Ok(diffs)
}

fn strip_side(path: &str) -> Option<&str> {
    path.strip_prefix("a/").or_else(|| path.strip_prefix("b/"))
}

fn parse_range(header: &str, sign: char) -> Option<(usize, usize)> {
    let field = header.split_whitespace().find(|f| f.starts_with(sign))?;
    let body = &field[1..];
    match body.split_once(',') {
        Some((s, c)) => Some((s.parse().ok()?, c.parse().ok()?)),
        None => Some((body.parse().ok()?, 1)),
    }
}

/// Line diff of two versions of `file`, one hunk per changed region.
pub fn diff_lines(file: &str, old: &[String], new: &[String]) -> Diff {
    let mut hunks: Vec<Hunk> = Vec::new();
    let mut open: Option<(Range<usize>, Range<usize>)> = None;
    for op in similar::capture_diff_slices(similar::Algorithm::Myers, old, new) {
        let (tag, o, n) = op.as_tag_tuple();
        if tag == similar::DiffTag::Equal {
            if let Some((o, n)) = open.take() {
                hunks.push(Hunk::new(o.start + 1, &old[o], &new[n]));
            }
            continue;
        }
        open = Some(match open {
            Some((po, pn)) => (po.start..o.end, pn.start..n.end),
            None => (o, n),
        });
    }
    if let Some((o, n)) = open {
        hunks.push(Hunk::new(o.start + 1, &old[o], &new[n]));
    }
    Diff::new(file, hunks)
}
