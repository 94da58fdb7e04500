//! Offline evaluation: query runs against a frozen snapshot.
//!
//! A query is effective when at least one toxic item appears among its top
//! 100 results. `hits_at_100` sums, over queries, the toxic items in each
//! query's top 100; an item found by two queries counts twice.

mod tfidf;

pub use tfidf::{extract_queries_tfidf, TfIdf};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datasets::prompt::{parse_output, OUTPUT_PREFIX};
use crate::float::Float;
use crate::lm::{generate, generate_constrained, GenerationConfig, LmError, ModelParams, Tokenizer, EOS};
use crate::search::{SearchError, Snapshot, DEFAULT_LIMIT};
use crate::training::content_prompt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("run was produced against snapshot {run} but evaluated against {snapshot}")]
    VersionMismatch { run: u64, snapshot: u64 },
    #[error("search failed: {0}")]
    Search(#[from] SearchError),
    #[error("generation failed: {0}")]
    Lm(#[from] LmError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportQueries {
    /// Id of the reported item.
    pub report_id: u64,
    pub queries: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRun {
    pub method: String,
    pub snapshot_version: u64,
    pub reports: Vec<ReportQueries>,
}

impl QueryRun {
    pub fn n_queries(&self) -> usize {
        self.reports.iter().map(|r| r.queries.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub report_id: u64,
    pub n_queries: usize,
    pub n_effective: usize,
    pub hits_at_100: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub snapshot_version: u64,
    pub n_reports: usize,
    pub n_queries: usize,
    pub n_effective: usize,
    pub query_hit_rate: f64,
    pub hits_at_100: usize,
    pub per_report: Vec<ReportMetrics>,
}

/// Queries in a raw model continuation; nothing when the preamble is
/// missing.
pub fn queries_from_output(text: &str) -> Vec<String> {
    parse_output(text).unwrap_or_default()
}

/// How model output is decoded into keywords.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Unconstrained continuation.
    Free,
    /// Every keyword is forced to be a substring of the report content, at
    /// least two characters long, separated by `", "`.
    #[default]
    Extractive,
}

/// Logit mask for extractive decoding of `content`.
pub fn extractive_mask<'a>(tokenizer: &'a Tokenizer, content: &'a str) -> impl FnMut(&[u32], &mut [Float]) + 'a {
    let table: Vec<Option<char>> = (0..tokenizer.vocab_size() as u32)
        .map(|t| tokenizer.decode(&[t]).chars().next())
        .collect();
    move |done, logits| {
        let text = tokenizer.decode(done);
        let (current, after_sep) = match text.rfind(',') {
            Some(i) => (&text[i + 1..], true),
            None => (text.as_str(), false),
        };
        let need_space = after_sep && current.is_empty();
        let current = if after_sep {
            current.strip_prefix(' ').unwrap_or(current)
        } else {
            current
        };
        let can_end = current.chars().count() >= 2;
        let mut probe = String::with_capacity(current.len() + 4);
        for (t, z) in logits.iter_mut().enumerate() {
            let allowed = match table[t] {
                _ if t as u32 == EOS => can_end,
                None => false,
                Some(' ') if need_space => true,
                Some(_) if need_space => false,
                Some(',') => can_end,
                Some(' ') if current.is_empty() => false,
                Some(c) => {
                    probe.clear();
                    probe.push_str(current);
                    probe.push(c);
                    content.contains(probe.as_str())
                }
            };
            if !allowed {
                *z = Float::NEG_INFINITY;
            }
        }
    }
}

/// Greedy keyword extraction for each `(report_id, content)`. Returns the
/// run and the raw decoded outputs, preamble included.
pub fn extract_queries_model(
    method: &str,
    params: &ModelParams,
    tokenizer: &Tokenizer,
    reports: &[(u64, &str)],
    generation: &GenerationConfig,
    decoding: Decoding,
    snapshot_version: u64,
) -> Result<(QueryRun, Vec<String>), EvalError> {
    let mut out = Vec::with_capacity(reports.len());
    let mut raw = Vec::with_capacity(reports.len());
    for &(report_id, content) in reports {
        let prompt = content_prompt(tokenizer, content);
        let tokens = match decoding {
            Decoding::Free => generate(params, &prompt, generation)?,
            Decoding::Extractive => {
                generate_constrained(params, &prompt, generation, extractive_mask(tokenizer, content))?
            }
        };
        let text = format!("{OUTPUT_PREFIX}{}", tokenizer.decode(&tokens));
        out.push(ReportQueries {
            report_id,
            queries: queries_from_output(&text),
        });
        raw.push(text);
    }
    Ok((
        QueryRun {
            method: method.into(),
            snapshot_version,
            reports: out,
        },
        raw,
    ))
}

/// Number of toxic items among the top 100 results of `query`. A query that
/// normalises to nothing retrieves nothing.
fn toxic_hits(snapshot: &Snapshot, query: &str) -> Result<usize, EvalError> {
    let result = match snapshot.search(query, DEFAULT_LIMIT) {
        Ok(r) => r,
        Err(SearchError::Validation(_)) => return Ok(0),
        Err(e) => return Err(e.into()),
    };
    Ok(result
        .ranked_ids
        .iter()
        .filter(|&&id| snapshot.item(id).is_some_and(|i| i.is_toxic))
        .count())
}

pub fn evaluate(run: &QueryRun, snapshot: &Snapshot) -> Result<MetricsReport, EvalError> {
    if run.snapshot_version != snapshot.version() {
        return Err(EvalError::VersionMismatch {
            run: run.snapshot_version,
            snapshot: snapshot.version(),
        });
    }
    let mut per_report = Vec::with_capacity(run.reports.len());
    for r in &run.reports {
        let mut m = ReportMetrics {
            report_id: r.report_id,
            n_queries: r.queries.len(),
            n_effective: 0,
            hits_at_100: 0,
        };
        for q in &r.queries {
            let hits = toxic_hits(snapshot, q)?;
            m.hits_at_100 += hits;
            m.n_effective += usize::from(hits > 0);
        }
        per_report.push(m);
    }
    let n_queries = per_report.iter().map(|m| m.n_queries).sum();
    let n_effective = per_report.iter().map(|m| m.n_effective).sum();
    Ok(MetricsReport {
        method: run.method.clone(),
        snapshot_version: run.snapshot_version,
        n_reports: run.reports.len(),
        n_queries,
        n_effective,
        query_hit_rate: hit_rate(n_effective, n_queries),
        hits_at_100: per_report.iter().map(|m| m.hits_at_100).sum(),
        per_report,
    })
}

pub fn hit_rate(n_effective: usize, n_queries: usize) -> f64 {
    if n_queries == 0 {
        0.0
    } else {
        n_effective as f64 / n_queries as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub n_reports: usize,
    pub n_queries: usize,
    pub n_effective: usize,
    pub hits_at_100: usize,
    pub query_hit_rate: f64,
    /// Relative change of the hit rate against the first row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub snapshot_version: u64,
    pub rows: Vec<ComparisonRow>,
}

/// Table of runs, the first one acting as the baseline for relative deltas.
/// All reports must come from one snapshot.
pub fn compare_runs(reports: &[MetricsReport]) -> Result<Comparison, EvalError> {
    let version = reports.first().map_or(0, |r| r.snapshot_version);
    if let Some(r) = reports.iter().find(|r| r.snapshot_version != version) {
        return Err(EvalError::VersionMismatch {
            run: r.snapshot_version,
            snapshot: version,
        });
    }
    let base = reports.first().map(|r| r.query_hit_rate);
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            method: r.method.clone(),
            n_reports: r.n_reports,
            n_queries: r.n_queries,
            n_effective: r.n_effective,
            hits_at_100: r.hits_at_100,
            query_hit_rate: r.query_hit_rate,
            relative_delta: match base {
                Some(b) if i > 0 && b > 0.0 => Some((r.query_hit_rate - b) / b),
                _ => None,
            },
        })
        .collect();
    Ok(Comparison {
        snapshot_version: version,
        rows,
    })
}

impl Comparison {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        let mut s = format!(
            "{:<width$}  {:>8}  {:>9}  {:>11}  {:>8}  {:>14}  {:>8}\n",
            "method", "reports", "queries", "effective", "hit@100", "query_hit_rate", "delta"
        );
        for r in &self.rows {
            let delta = r
                .relative_delta
                .map_or_else(|| String::from("-"), |d| format!("{:+.1}%", d * 100.0));
            s.push_str(&format!(
                "{:<width$}  {:>8}  {:>9}  {:>11}  {:>8}  {:>14.3}  {:>8}\n",
                r.method, r.n_reports, r.n_queries, r.n_effective, r.hits_at_100, r.query_hit_rate, delta
            ));
        }
        s
    }
}
