//! Token counting.
//!
//! Every threshold in the engine is expressed in tokens of the installed
//! [`Tokenizer`]. The control loop only relies on counts being deterministic
//! and monotone under concatenation, so the default is a byte heuristic.

use std::fmt;

/// Non-negative token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenCount(pub u64);

impl TokenCount {
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for TokenCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn count(&self, text: &str) -> TokenCount;

    /// Largest char-boundary byte offset whose prefix fits in `budget` tokens.
    fn prefix_within(&self, text: &str, budget: u64) -> usize {
        if self.count(text).0 <= budget {
            return text.len();
        }
        let bounds = boundaries(text);
        // count(prefix) is monotone in its length, so "fits" is a prefix of `bounds`.
        let fits = bounds.partition_point(|&b| self.count(&text[..b]).0 <= budget);
        bounds[fits.saturating_sub(1)]
    }

    /// Smallest char-boundary byte offset whose suffix fits in `budget` tokens.
    fn suffix_within(&self, text: &str, budget: u64) -> usize {
        if self.count(text).0 <= budget {
            return 0;
        }
        let bounds = boundaries(text);
        let first_fit = bounds.partition_point(|&b| self.count(&text[b..]).0 > budget);
        bounds[first_fit.min(bounds.len() - 1)]
    }
}

fn boundaries(text: &str) -> Vec<usize> {
    text.char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect()
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteHeuristic;

impl Tokenizer for ByteHeuristic {
    fn count(&self, text: &str) -> TokenCount {
        TokenCount((text.len() as u64).div_ceil(4))
    }

    fn prefix_within(&self, text: &str, budget: u64) -> usize {
        let max = (budget.saturating_mul(4)).min(text.len() as u64) as usize;
        floor_boundary(text, max)
    }

    fn suffix_within(&self, text: &str, budget: u64) -> usize {
        let keep = (budget.saturating_mul(4)).min(text.len() as u64) as usize;
        ceil_boundary(text, text.len() - keep)
    }
}

/// Counts tokens with the default heuristic.
pub fn count_tokens(text: &str) -> TokenCount {
    ByteHeuristic.count(text)
}

pub(crate) fn floor_boundary(text: &str, mut idx: usize) -> usize {
    if idx >= text.len() {
        return text.len();
    }
    while !text.is_char_boundary(idx) {
        idx -= 1;
    }
    idx
}

pub(crate) fn ceil_boundary(text: &str, mut idx: usize) -> usize {
    if idx >= text.len() {
        return text.len();
    }
    while !text.is_char_boundary(idx) {
        idx += 1;
    }
    idx
}
