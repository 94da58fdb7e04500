//! Auditor session log: replay, online metrics and preference export.
//!
//! Suggested queries carry an origin. A model suggestion whose text equals a
//! human suggestion on the same report is attributed to the human.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datasets::PreferenceTriple;
use crate::text::normalize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Human,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    ReportShown {
        report_id: u64,
        content: String,
    },
    QuerySuggested {
        report_id: u64,
        query_id: u64,
        query: String,
        origin: Actor,
    },
    QueryAccepted {
        query_id: u64,
    },
    QueryRejected {
        query_id: u64,
    },
    SearchExecuted {
        /// Set when the search ran a suggested query.
        #[serde(default)]
        query_id: Option<u64>,
        query: String,
        result_ids: Vec<u64>,
    },
    ItemLabeledToxic {
        item_id: u64,
        /// The suggested query whose results surfaced the item, if any.
        #[serde(default)]
        query_id: Option<u64>,
    },
    ItemRemoved {
        item_id: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub tick: u64,
    pub actor: Actor,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("event {index}: tick {tick} is not after {previous}")]
    NonMonotoneTick { index: usize, tick: u64, previous: u64 },
    #[error("event {index}: {reason}")]
    Inconsistent { index: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestedQuery {
    pub query_id: u64,
    pub report_id: u64,
    pub query: String,
    /// Origin after the overlap rule.
    pub origin: Actor,
    pub accepted: Option<bool>,
}

/// State reconstructed from a log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionState {
    pub reports: BTreeMap<u64, String>,
    pub queries: BTreeMap<u64, SuggestedQuery>,
    /// Union of results per suggested query.
    pub results: BTreeMap<u64, BTreeSet<u64>>,
    /// Labeled item -> query credited with it.
    pub labeled: BTreeMap<u64, Option<u64>>,
    pub removed: BTreeSet<u64>,
}

/// Replays `events`, checking ordering and reference consistency.
pub fn replay(events: &[SessionEvent]) -> Result<SessionState, SessionError> {
    let mut s = SessionState::default();
    let mut previous: Option<u64> = None;
    for (index, e) in events.iter().enumerate() {
        if let Some(p) = previous {
            if e.tick <= p {
                return Err(SessionError::NonMonotoneTick {
                    index,
                    tick: e.tick,
                    previous: p,
                });
            }
        }
        previous = Some(e.tick);
        let bad = |reason: String| SessionError::Inconsistent { index, reason };
        match &e.kind {
            EventKind::ReportShown { report_id, content } => {
                s.reports.insert(*report_id, content.clone());
            }
            EventKind::QuerySuggested {
                report_id,
                query_id,
                query,
                origin,
            } => {
                if !s.reports.contains_key(report_id) {
                    return Err(bad(format!("query suggested for unseen report {report_id}")));
                }
                if s.queries.contains_key(query_id) {
                    return Err(bad(format!("query id {query_id} suggested twice")));
                }
                let key = normalize(query);
                let overlaps_human = s
                    .queries
                    .values()
                    .any(|q| q.report_id == *report_id && q.origin == Actor::Human && normalize(&q.query) == key);
                let origin = if overlaps_human { Actor::Human } else { *origin };
                if origin == Actor::Human {
                    // A human suggestion arriving later absorbs earlier identical model ones.
                    for q in s.queries.values_mut() {
                        if q.report_id == *report_id && normalize(&q.query) == key {
                            q.origin = Actor::Human;
                        }
                    }
                }
                s.queries.insert(
                    *query_id,
                    SuggestedQuery {
                        query_id: *query_id,
                        report_id: *report_id,
                        query: query.clone(),
                        origin,
                        accepted: None,
                    },
                );
            }
            EventKind::QueryAccepted { query_id } | EventKind::QueryRejected { query_id } => {
                let q = s
                    .queries
                    .get_mut(query_id)
                    .ok_or_else(|| bad(format!("decision on unknown query {query_id}")))?;
                q.accepted = Some(matches!(e.kind, EventKind::QueryAccepted { .. }));
            }
            EventKind::SearchExecuted {
                query_id, result_ids, ..
            } => {
                if let Some(id) = query_id {
                    if !s.queries.contains_key(id) {
                        return Err(bad(format!("search for unknown query {id}")));
                    }
                    s.results.entry(*id).or_default().extend(result_ids.iter().copied());
                }
            }
            EventKind::ItemLabeledToxic { item_id, query_id } => {
                if let Some(id) = query_id {
                    if !s.queries.contains_key(id) {
                        return Err(bad(format!("label credited to unknown query {id}")));
                    }
                }
                s.labeled.entry(*item_id).or_insert(*query_id);
            }
            EventKind::ItemRemoved { item_id } => {
                if !s.labeled.contains_key(item_id) {
                    return Err(bad(format!("item {item_id} removed before being labeled")));
                }
                s.removed.insert(*item_id);
            }
        }
    }
    Ok(s)
}

/// Online metrics. Each ratio is `None` when its denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub model_queries_shown: usize,
    pub model_queries_accepted: usize,
    pub acceptance_rate: Option<f64>,
    pub human_toxic_items: usize,
    pub model_toxic_items: usize,
    /// Toxic items credited to model queries per toxic item credited to
    /// human queries.
    pub toxic_item_detection_increment: Option<f64>,
    pub human_hit_queries: usize,
    pub model_hit_queries: usize,
    /// Model queries that led to a labeled item per such human query.
    pub hit_query_increment: Option<f64>,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn session_metrics(state: &SessionState) -> SessionMetrics {
    let model: Vec<&SuggestedQuery> = state.queries.values().filter(|q| q.origin == Actor::Model).collect();
    let shown = model.len();
    let accepted = model.iter().filter(|q| q.accepted == Some(true)).count();

    let mut items: BTreeMap<Actor, usize> = BTreeMap::new();
    let mut hit_queries: BTreeMap<Actor, BTreeSet<u64>> = BTreeMap::new();
    for query_id in state.labeled.values().flatten() {
        let origin = state.queries[query_id].origin;
        *items.entry(origin).or_default() += 1;
        hit_queries.entry(origin).or_default().insert(*query_id);
    }
    let count = |m: &BTreeMap<Actor, usize>, a| m.get(&a).copied().unwrap_or(0);
    let hits = |a| hit_queries.get(&a).map_or(0, BTreeSet::len);
    SessionMetrics {
        model_queries_shown: shown,
        model_queries_accepted: accepted,
        acceptance_rate: ratio(accepted, shown),
        human_toxic_items: count(&items, Actor::Human),
        model_toxic_items: count(&items, Actor::Model),
        toxic_item_detection_increment: ratio(count(&items, Actor::Model), count(&items, Actor::Human)),
        human_hit_queries: hits(Actor::Human),
        model_hit_queries: hits(Actor::Model),
        hit_query_increment: ratio(hits(Actor::Model), hits(Actor::Human)),
    }
}

/// Toxic rate observed for a suggested query: labeled items among its
/// results over the number of results. `None` when it was never searched.
pub fn observed_toxic_rate(state: &SessionState, query_id: u64) -> Option<f64> {
    let results = state.results.get(&query_id)?;
    if results.is_empty() {
        return Some(0.0);
    }
    let toxic = results.iter().filter(|id| state.labeled.contains_key(id)).count();
    Some(toxic as f64 / results.len() as f64)
}

/// Preference triples from live feedback: per report, accepted queries whose
/// observed toxic rate exceeds `threshold` are preferred; every other shown
/// query that was searched without exceeding it, or was rejected, is
/// dispreferred. Reports lacking either side yield nothing.
pub fn export_preference_pairs(state: &SessionState, threshold: f64) -> Vec<PreferenceTriple> {
    let mut by_report: BTreeMap<u64, Vec<&SuggestedQuery>> = BTreeMap::new();
    for q in state.queries.values() {
        by_report.entry(q.report_id).or_default().push(q);
    }
    let mut out = Vec::new();
    for (report_id, queries) in by_report {
        let mut preferred: Vec<String> = Vec::new();
        let mut dispreferred: Vec<String> = Vec::new();
        for q in queries {
            let rate = observed_toxic_rate(state, q.query_id);
            let side = match (q.accepted, rate) {
                (Some(true), Some(r)) if r > threshold => Some(&mut preferred),
                (_, Some(_)) | (Some(false), None) => Some(&mut dispreferred),
                _ => None,
            };
            if let Some(side) = side {
                if !side.contains(&q.query) {
                    side.push(q.query.clone());
                }
            }
        }
        dispreferred.retain(|d| !preferred.contains(d));
        if !preferred.is_empty() && !dispreferred.is_empty() {
            out.push(PreferenceTriple {
                content: state.reports[&report_id].clone(),
                preferred,
                dispreferred,
            });
        }
    }
    out
}
