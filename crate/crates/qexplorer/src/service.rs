//! Auditor HTTP API over a live index.
//!
//! Every request is recorded as a session event; metrics and preference
//! exports are replays of that log. Responses carry `schema_version`.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qexplorer_core::datasets::PreferenceTriple;
use qexplorer_core::eval::{extract_queries_model, Decoding};
use qexplorer_core::lm::{GenerationConfig, ModelParams, Tokenizer};
use qexplorer_core::search::{InvertedIndex, SearchError, DEFAULT_LIMIT};
use qexplorer_core::session::{
    export_preference_pairs, replay, session_metrics, Actor, EventKind, SessionEvent, SessionMetrics, SessionState,
};
use qexplorer_core::text::normalize;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::SCHEMA_VERSION;
use crate::pipeline::{Pipeline, Stage};
use crate::{stages, Error};

/// Largest page a search may request.
pub const MAX_SEARCH_LIMIT: usize = 1000;

/// A report as the service sees it: content plus the annotator's keywords.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub report_id: u64,
    pub content: String,
    pub human_keywords: Vec<String>,
}

pub struct Extractor {
    pub tokenizer: Tokenizer,
    pub params: ModelParams,
    pub generation: GenerationConfig,
    pub decoding: Decoding,
}

struct Inner {
    index: InvertedIndex,
    reports: BTreeMap<u64, ReportEntry>,
    extractor: Option<Extractor>,
    events: Vec<SessionEvent>,
    /// Query ids suggested per report, in suggestion order.
    suggested: BTreeMap<u64, Vec<u64>>,
    next_query_id: u64,
}

#[derive(Clone)]
pub struct Service {
    inner: Arc<Mutex<Inner>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "schema_version": SCHEMA_VERSION, "error": self.message });
        (self.status, Json(body)).into_response()
    }
}

impl From<SearchError> for ApiError {
    fn from(e: SearchError) -> Self {
        let status = match e {
            SearchError::Validation(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::CONFLICT,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn respond(mut body: Value) -> ApiResult {
    body["schema_version"] = json!(SCHEMA_VERSION);
    Ok(Json(body))
}

#[derive(Serialize)]
struct Suggestion {
    query_id: u64,
    query: String,
    origin: Actor,
}

#[derive(Serialize)]
struct Hit {
    item_id: u64,
    text: String,
    score: f64,
}

#[derive(Deserialize)]
struct SearchRequest {
    query: String,
    #[serde(default)]
    query_id: Option<u64>,
    #[serde(default)]
    limit: Option<usize>,
}

#[derive(Default, Deserialize)]
struct LabelRequest {
    #[serde(default)]
    query_id: Option<u64>,
}

#[derive(Deserialize)]
struct ExportParams {
    #[serde(default = "default_threshold")]
    threshold: f64,
}

fn default_threshold() -> f64 {
    qexplorer_core::datasets::DEFAULT_THRESHOLD
}

impl Inner {
    fn tick(&self) -> u64 {
        self.events.last().map_or(1, |e| e.tick + 1)
    }

    /// Appends an event if the log stays consistent.
    fn record(&mut self, actor: Actor, kind: EventKind) -> Result<SessionState, ApiError> {
        let tick = self.tick();
        self.events.push(SessionEvent { tick, actor, kind });
        match replay(&self.events) {
            Ok(state) => Ok(state),
            Err(e) => {
                self.events.pop();
                Err(ApiError::new(StatusCode::CONFLICT, e.to_string()))
            }
        }
    }

    fn state(&self) -> SessionState {
        replay(&self.events).expect("the log is validated on every append")
    }

    fn suggestions(&self, report_id: u64) -> Vec<Suggestion> {
        let state = self.state();
        self.suggested
            .get(&report_id)
            .into_iter()
            .flatten()
            .map(|id| {
                let q = &state.queries[id];
                Suggestion {
                    query_id: q.query_id,
                    query: q.query.clone(),
                    origin: q.origin,
                }
            })
            .collect()
    }

    fn model_queries(&self, report: &ReportEntry) -> Result<Vec<String>, ApiError> {
        let Some(ex) = &self.extractor else {
            return Ok(Vec::new());
        };
        let (run, _) = extract_queries_model(
            "service",
            &ex.params,
            &ex.tokenizer,
            &[(report.report_id, report.content.as_str())],
            &ex.generation,
            ex.decoding,
            self.index.version(),
        )
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(run.reports.into_iter().flat_map(|r| r.queries).collect())
    }

    fn suggest(&mut self, report_id: u64) -> Result<Vec<Suggestion>, ApiError> {
        let report = self
            .reports
            .get(&report_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no report {report_id}")))?;
        if self.suggested.contains_key(&report_id) {
            return Ok(self.suggestions(report_id));
        }
        let model = self.model_queries(&report)?;
        self.record(
            Actor::Model,
            EventKind::ReportShown {
                report_id,
                content: report.content.clone(),
            },
        )?;
        let mut seen = BTreeMap::new();
        let candidates = report
            .human_keywords
            .iter()
            .map(|q| (q, Actor::Human))
            .chain(model.iter().map(|q| (q, Actor::Model)));
        let mut ids = Vec::new();
        for (query, origin) in candidates {
            let key = normalize(query);
            let prior = seen.get(&key).copied();
            // A model query equal to a human one is still logged so the
            // overlap rule credits the human, but it is not shown twice.
            let echo = origin == Actor::Model && prior == Some(Actor::Human);
            if key.is_empty() || (prior.is_some() && !echo) {
                continue;
            }
            let query_id = self.next_query_id;
            self.next_query_id += 1;
            self.record(
                origin,
                EventKind::QuerySuggested {
                    report_id,
                    query_id,
                    query: query.clone(),
                    origin,
                },
            )?;
            if !echo {
                seen.insert(key, origin);
                ids.push(query_id);
            }
        }
        self.suggested.insert(report_id, ids);
        Ok(self.suggestions(report_id))
    }
}

impl Service {
    pub fn new(index: InvertedIndex, reports: Vec<ReportEntry>, extractor: Option<Extractor>) -> Self {
        let reports = reports.into_iter().map(|r| (r.report_id, r)).collect();
        Self {
            inner: Arc::new(Mutex::new(Inner {
                index,
                reports,
                extractor,
                events: Vec::new(),
                suggested: BTreeMap::new(),
                next_query_id: 1,
            })),
        }
    }

    /// Serves the evaluation corpus and test reports of `seed`, running the
    /// stages that are missing. With `with_model`, the aligned model adds
    /// suggestions after the human ones.
    pub fn from_pipeline(pipeline: &Pipeline, seed: u64, with_model: bool) -> Result<Self, Error> {
        let corpus_m = pipeline.ensure(seed, Stage::Corpus)?;
        let corpus = pipeline.load_corpus(seed, &corpus_m)?;
        let index_m = pipeline.ensure(seed, Stage::Index)?;
        let index = pipeline.load_index(seed, &index_m, "eval", &corpus.eval.items)?;
        let contents = stages::report_contents(&corpus.eval, &corpus.test_reports)?;
        let reports = corpus
            .test_reports
            .iter()
            .zip(contents)
            .map(|(r, (report_id, content))| ReportEntry {
                report_id,
                content,
                human_keywords: r.oracle_keywords.clone(),
            })
            .collect();
        let extractor = if with_model {
            let (tokenizer, params) = pipeline.load_aligned(seed)?;
            Some(Extractor {
                tokenizer,
                params,
                generation: stages::generation(pipeline.config()),
                decoding: pipeline.config().eval.decoding,
            })
        } else {
            None
        };
        Ok(Self::new(index, reports, extractor))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        // A panic mid-request leaves the log valid: events are only kept
        // after a successful replay.
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.lock().events.clone()
    }

    pub fn metrics(&self) -> SessionMetrics {
        session_metrics(&self.lock().state())
    }

    pub fn export(&self, threshold: f64) -> Vec<PreferenceTriple> {
        export_preference_pairs(&self.lock().state(), threshold)
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/health", get(health))
            .route("/reports", get(list_reports))
            .route("/reports/{id}/suggest", post(suggest))
            .route("/search", post(search))
            .route("/queries/{id}/accept", post(accept))
            .route("/queries/{id}/reject", post(reject))
            .route("/items/{id}/label", post(label))
            .route("/metrics/session", get(metrics))
            .route("/session/events", get(events))
            .route("/export/preferences", get(export))
            .with_state(self)
    }
}

async fn health(State(s): State<Service>) -> ApiResult {
    let version = s.lock().index.version();
    respond(json!({ "status": "ok", "index_version": version }))
}

async fn list_reports(State(s): State<Service>) -> ApiResult {
    let inner = s.lock();
    let reports: Vec<Value> = inner
        .reports
        .values()
        .map(|r| json!({ "report_id": r.report_id, "content": r.content }))
        .collect();
    respond(json!({ "reports": reports }))
}

async fn suggest(State(s): State<Service>, Path(id): Path<u64>) -> ApiResult {
    let suggestions = s.lock().suggest(id)?;
    respond(json!({ "report_id": id, "suggestions": suggestions }))
}

async fn search(State(s): State<Service>, Json(req): Json<SearchRequest>) -> ApiResult {
    let limit = req.limit.unwrap_or(DEFAULT_LIMIT);
    if limit == 0 || limit > MAX_SEARCH_LIMIT {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("limit must be in 1..={MAX_SEARCH_LIMIT}"),
        ));
    }
    let mut inner = s.lock();
    let result = inner.index.search(&req.query, limit)?;
    inner.record(
        Actor::Human,
        EventKind::SearchExecuted {
            query_id: req.query_id,
            query: req.query.clone(),
            result_ids: result.ranked_ids.clone(),
        },
    )?;
    let hits: Vec<Hit> = result
        .ranked_ids
        .iter()
        .zip(&result.scores)
        .map(|(&item_id, &score)| Hit {
            item_id,
            text: inner.index.item(item_id).map(|i| i.text.clone()).unwrap_or_default(),
            score,
        })
        .collect();
    respond(json!({
        "query": result.query,
        "index_version": result.snapshot_version,
        "results": hits,
    }))
}

fn decide(s: &Service, query_id: u64, accepted: bool) -> ApiResult {
    let kind = if accepted {
        EventKind::QueryAccepted { query_id }
    } else {
        EventKind::QueryRejected { query_id }
    };
    let mut inner = s.lock();
    if !inner.state().queries.contains_key(&query_id) {
        return Err(ApiError::not_found(format!("no query {query_id}")));
    }
    inner.record(Actor::Human, kind)?;
    respond(json!({ "query_id": query_id, "accepted": accepted }))
}

async fn accept(State(s): State<Service>, Path(id): Path<u64>) -> ApiResult {
    decide(&s, id, true)
}

async fn reject(State(s): State<Service>, Path(id): Path<u64>) -> ApiResult {
    decide(&s, id, false)
}

/// Labels an item toxic and takes it down.
async fn label(State(s): State<Service>, Path(id): Path<u64>, body: Option<Json<LabelRequest>>) -> ApiResult {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let mut inner = s.lock();
    if inner.index.item(id).is_none() {
        return Err(ApiError::not_found(format!("no item {id}")));
    }
    if inner.index.is_removed(id) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("item {id} is already removed"),
        ));
    }
    inner.record(
        Actor::Human,
        EventKind::ItemLabeledToxic {
            item_id: id,
            query_id: req.query_id,
        },
    )?;
    let version = inner.index.remove_item(id)?;
    inner.record(Actor::Human, EventKind::ItemRemoved { item_id: id })?;
    respond(json!({ "item_id": id, "index_version": version }))
}

async fn metrics(State(s): State<Service>) -> ApiResult {
    respond(json!({ "metrics": s.metrics() }))
}

async fn events(State(s): State<Service>) -> ApiResult {
    respond(json!({ "events": s.events() }))
}

async fn export(State(s): State<Service>, Query(p): Query<ExportParams>) -> ApiResult {
    if !(0.0..=1.0).contains(&p.threshold) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "threshold must be in [0, 1]"));
    }
    respond(json!({ "threshold": p.threshold, "triples": s.export(p.threshold) }))
}

pub async fn serve(service: Service, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(port, "serving");
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
