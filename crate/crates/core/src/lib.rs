//! Core algorithms for search-feedback-driven query extraction.
//!
//! Everything here is pure computation over in-memory values: the synthetic
//! marketplace corpus, the substring search system used as a feedback oracle,
//! dataset construction, a small decoder-only language model with low-rank
//! adapters, the SFT / DPO trainers and the offline evaluation metrics.
//! IO, file formats, the CLI and the HTTP service live in the `qexplorer`
//! crate.

#![no_std]
#![forbid(unsafe_code)]
// `Float` is `f32` under the `f32` feature, so widening casts are not no-ops.
#![allow(clippy::unnecessary_cast)]

extern crate alloc;

pub mod corpus;
pub mod datasets;
pub mod eval;
pub mod float;
pub mod lm;
pub mod rng;
pub mod search;
pub mod session;
pub mod text;
pub mod training;

pub use corpus::{Campaign, Category, Corpus, CorpusConfig, Item, Report};
pub use float::Float;
pub use search::{FeedbackStats, InvertedIndex, RiskScorer, SearchResult, Snapshot};
