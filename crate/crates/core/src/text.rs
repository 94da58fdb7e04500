//! Character-level text helpers shared by search, datasets and evaluation.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases and collapses whitespace runs into a single space, trimming
/// both ends.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    out
}

/// Number of characters (not bytes).
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

pub fn bigrams(text: &str) -> impl Iterator<Item = (char, char)> + '_ {
    let mut chars = text.chars();
    let mut prev = chars.next();
    chars.map(move |c| {
        let pair = (prev.unwrap_or(c), c);
        prev = Some(c);
        pair
    })
}

pub fn bigram_set(text: &str) -> BTreeSet<(char, char)> {
    bigrams(text).collect()
}

/// Jaccard similarity of two sets; two empty sets are identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// All distinct character n-grams of `text` with `min <= n <= max`, in order
/// of first occurrence.
pub fn char_ngrams(text: &str, min: usize, max: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for start in 0..chars.len() {
        for n in min..=max {
            if start + n > chars.len() {
                break;
            }
            let gram: String = chars[start..start + n].iter().collect();
            if seen.insert(gram.clone()) {
                out.push(gram);
            }
        }
    }
    out
}

/// Non-overlapping occurrence count of `needle` in `hay`.
pub fn count_occurrences(hay: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    hay.matches(needle).count()
}
