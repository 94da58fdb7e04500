use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use qexplorer::service::{Extractor, ReportEntry, Service};
use qexplorer_core::corpus::{Category, Item};
use qexplorer_core::eval::Decoding;
use qexplorer_core::lm::{DecodeMode, GenerationConfig, ModelConfig, ModelParams, Tokenizer};
use qexplorer_core::search::{InvertedIndex, RiskScorer};
use serde_json::{json, Value};
use tower::ServiceExt;

fn item(id: u64, text: &str, toxic: bool) -> Item {
    Item {
        id,
        category: Category(0),
        is_toxic: toxic,
        campaign_id: toxic.then_some(0),
        text: text.into(),
        created_at: id,
    }
}

fn items() -> Vec<Item> {
    vec![
        item(1, "cheap k7 pills now", true),
        item(2, "k7 deals here", true),
        item(3, "hello world friends", false),
        item(4, "k7 weather today", false),
        item(5, "buy zz9 offer", true),
        item(6, "special offer on shoes", false),
    ]
}

fn index() -> InvertedIndex {
    let items = items();
    let mut index = InvertedIndex::build(items.clone()).unwrap();
    index.attach_scorer(RiskScorer::fit(&items).unwrap()).unwrap();
    index
}

fn reports() -> Vec<ReportEntry> {
    vec![
        ReportEntry {
            report_id: 5,
            content: "buy zz9 offer".into(),
            human_keywords: vec!["zz9".into(), "offer".into(), " ZZ9 ".into()],
        },
        ReportEntry {
            report_id: 1,
            content: "cheap k7 pills now".into(),
            human_keywords: vec!["kkkk".into()],
        },
    ]
}

/// A model whose only signal is the head bias, so greedy decoding emits
/// `k` until the token budget runs out.
fn constant_extractor() -> Extractor {
    let texts: Vec<String> = items().into_iter().map(|i| i.text).collect();
    let tokenizer = Tokenizer::from_texts(texts.iter().map(String::as_str));
    let config = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        context_length: 64,
    };
    let mut params = ModelParams::zeros(config).unwrap();
    params.head.bias[tokenizer.id('k').unwrap() as usize] = 1.0;
    Extractor {
        tokenizer,
        params,
        generation: GenerationConfig {
            max_new_tokens: 4,
            mode: DecodeMode::Greedy,
            stop_token: None,
            seed: 0,
        },
        decoding: Decoding::Free,
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn suggestion_pairs(v: &Value) -> Vec<(String, String)> {
    v["suggestions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            (
                s["query"].as_str().unwrap().to_string(),
                s["origin"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

#[tokio::test]
async fn health_and_reports_carry_schema_version() {
    let app = Service::new(index(), reports(), None).router();
    let (status, v) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["schema_version"], 1);
    let (_, v) = call(&app, Method::GET, "/reports", None).await;
    assert_eq!(v["schema_version"], 1);
    let ids: Vec<u64> = v["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["report_id"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, vec![1, 5]);
}

#[tokio::test]
async fn human_suggestions_precede_model_ones() {
    let app = Service::new(index(), reports(), Some(constant_extractor())).router();
    let (status, v) = call(&app, Method::POST, "/reports/5/suggest", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        suggestion_pairs(&v),
        vec![
            ("zz9".to_string(), "human".to_string()),
            ("offer".to_string(), "human".to_string()),
            ("kkkk".to_string(), "model".to_string()),
        ]
    );
    // Suggesting again returns the same queries without new events.
    let before = call(&app, Method::GET, "/session/events", None).await.1["events"]
        .as_array()
        .unwrap()
        .len();
    let (_, again) = call(&app, Method::POST, "/reports/5/suggest", None).await;
    assert_eq!(again["suggestions"], v["suggestions"]);
    let after = call(&app, Method::GET, "/session/events", None).await.1["events"]
        .as_array()
        .unwrap()
        .len();
    assert_eq!(before, after);
}

#[tokio::test]
async fn model_echo_of_human_query_is_credited_to_human() {
    let app = Service::new(index(), reports(), Some(constant_extractor())).router();
    let (_, v) = call(&app, Method::POST, "/reports/1/suggest", None).await;
    assert_eq!(suggestion_pairs(&v), vec![("kkkk".to_string(), "human".to_string())]);
    let (_, m) = call(&app, Method::GET, "/metrics/session", None).await;
    assert_eq!(m["metrics"]["model_queries_shown"], 0);
    let (_, e) = call(&app, Method::GET, "/session/events", None).await;
    let suggested = e["events"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "query_suggested")
        .count();
    assert_eq!(suggested, 2);
}

#[tokio::test]
async fn unknown_report_is_not_found() {
    let app = Service::new(index(), reports(), None).router();
    let (status, v) = call(&app, Method::POST, "/reports/99/suggest", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["schema_version"], 1);
    assert!(v["error"].as_str().unwrap().contains("99"));
}

#[tokio::test]
async fn search_label_takedown_and_export() {
    let app = Service::new(index(), reports(), None).router();
    let (_, v) = call(&app, Method::POST, "/reports/5/suggest", None).await;
    let ids: Vec<u64> = v["suggestions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["query_id"].as_u64().unwrap())
        .collect();
    let (zz9, offer) = (ids[0], ids[1]);

    let (status, r) = call(
        &app,
        Method::POST,
        "/search",
        Some(json!({"query": "zz9", "query_id": zz9})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let hits: Vec<u64> = r["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["item_id"].as_u64().unwrap())
        .collect();
    assert_eq!(hits, vec![5]);
    assert_eq!(r["results"][0]["text"], "buy zz9 offer");

    let (status, l) = call(&app, Method::POST, "/items/5/label", Some(json!({"query_id": zz9}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(l["index_version"], r["index_version"].as_u64().unwrap() + 1);

    // The takedown is visible to later searches.
    let (_, r2) = call(&app, Method::POST, "/search", Some(json!({"query": "zz9"}))).await;
    assert!(r2["results"].as_array().unwrap().is_empty());
    let (status, _) = call(&app, Method::POST, "/items/5/label", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::POST, "/items/404/label", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, r3) = call(
        &app,
        Method::POST,
        "/search",
        Some(json!({"query": "offer", "query_id": offer})),
    )
    .await;
    let offer_hits: Vec<u64> = r3["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["item_id"].as_u64().unwrap())
        .collect();
    assert_eq!(offer_hits, vec![6]);

    assert_eq!(
        call(&app, Method::POST, &format!("/queries/{zz9}/accept"), None)
            .await
            .0,
        StatusCode::OK
    );
    assert_eq!(
        call(&app, Method::POST, &format!("/queries/{offer}/reject"), None)
            .await
            .0,
        StatusCode::OK
    );
    assert_eq!(
        call(&app, Method::POST, "/queries/77/accept", None).await.0,
        StatusCode::NOT_FOUND
    );

    let (_, m) = call(&app, Method::GET, "/metrics/session", None).await;
    assert_eq!(m["metrics"]["human_toxic_items"], 1);
    assert_eq!(m["metrics"]["human_hit_queries"], 1);
    assert_eq!(m["metrics"]["acceptance_rate"], Value::Null);

    let (status, x) = call(&app, Method::GET, "/export/preferences?threshold=0.05", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        x["triples"],
        json!([{ "content": "buy zz9 offer", "preferred": ["zz9"], "dispreferred": ["offer"] }])
    );
}

#[tokio::test]
async fn invalid_requests_leave_the_log_untouched() {
    let app = Service::new(index(), reports(), None).router();
    let (status, _) = call(&app, Method::POST, "/search", Some(json!({"query": "k7", "limit": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::POST, "/search", Some(json!({"query": "   "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        Method::POST,
        "/search",
        Some(json!({"query": "k7", "query_id": 3})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::GET, "/export/preferences?threshold=2", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, e) = call(&app, Method::GET, "/session/events", None).await;
    assert!(e["events"].as_array().unwrap().is_empty());
}
