//! The search system used as the feedback oracle.
//!
//! Retrieval is exact substring matching: candidates come from intersecting
//! the character-bigram postings of the normalized query and are then
//! verified against the normalized document text. Candidates are ranked by a
//! per-item risk score (descending, ties by ascending id).

mod index;
mod scorer;

pub use index::{build_index, FeedbackStats, InvertedIndex, SearchResult, Snapshot};
pub use scorer::{roc_auc, RiskScorer};

use alloc::string::String;

/// Default exposure limit, matching "hit@100".
pub const DEFAULT_LIMIT: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SearchError {
    #[error("invalid index input: {0}")]
    Config(String),
    #[error("invalid query: {0}")]
    Validation(String),
    #[error("item {0} not found")]
    NotFound(u64),
    #[error("risk scorer has not been fitted")]
    Unfitted,
}
