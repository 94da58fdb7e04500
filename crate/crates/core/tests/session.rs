use qexplorer_core::session::{
    export_preference_pairs, observed_toxic_rate, replay, session_metrics, Actor, EventKind, SessionError, SessionEvent,
};

struct Log {
    events: Vec<SessionEvent>,
}

impl Log {
    fn new() -> Self {
        Self { events: Vec::new() }
    }

    fn push(&mut self, actor: Actor, kind: EventKind) -> &mut Self {
        let tick = self.events.len() as u64 + 1;
        self.events.push(SessionEvent { tick, actor, kind });
        self
    }

    fn report(&mut self, report_id: u64, content: &str) -> &mut Self {
        self.push(
            Actor::Human,
            EventKind::ReportShown {
                report_id,
                content: content.into(),
            },
        )
    }

    fn suggest(&mut self, report_id: u64, query_id: u64, query: &str, origin: Actor) -> &mut Self {
        self.push(
            origin,
            EventKind::QuerySuggested {
                report_id,
                query_id,
                query: query.into(),
                origin,
            },
        )
    }

    fn accept(&mut self, query_id: u64) -> &mut Self {
        self.push(Actor::Human, EventKind::QueryAccepted { query_id })
    }

    fn reject(&mut self, query_id: u64) -> &mut Self {
        self.push(Actor::Human, EventKind::QueryRejected { query_id })
    }

    fn search(&mut self, query_id: u64, query: &str, results: &[u64]) -> &mut Self {
        self.push(
            Actor::Human,
            EventKind::SearchExecuted {
                query_id: Some(query_id),
                query: query.into(),
                result_ids: results.to_vec(),
            },
        )
    }

    fn label(&mut self, item_id: u64, query_id: Option<u64>) -> &mut Self {
        self.push(Actor::Human, EventKind::ItemLabeledToxic { item_id, query_id })
    }

    fn remove(&mut self, item_id: u64) -> &mut Self {
        self.push(Actor::Human, EventKind::ItemRemoved { item_id })
    }
}

/// Two reports. Human query 1 and model queries 2 (duplicate of 1), 3, 4
/// on report 10; model query 5 and human query 6 on report 20.
fn scripted() -> Log {
    let mut log = Log::new();
    log.report(10, "k7offer deal")
        .suggest(10, 1, "k7", Actor::Human)
        .suggest(10, 2, "K7", Actor::Model)
        .suggest(10, 3, "offer", Actor::Model)
        .suggest(10, 4, "deal", Actor::Model)
        .accept(1)
        .accept(2)
        .accept(3)
        .reject(4)
        .search(1, "k7", &[100, 101])
        .search(3, "offer", &[100, 102, 103, 104])
        .label(100, Some(1))
        .label(101, Some(1))
        .label(102, Some(3))
        .remove(100)
        .report(20, "zz9 promo")
        .suggest(20, 5, "zz9", Actor::Model)
        .suggest(20, 6, "promo", Actor::Human)
        .accept(5)
        .accept(6)
        .search(5, "zz9", &[200, 201])
        .search(6, "promo", &[201, 202])
        .label(200, Some(5))
        .label(201, Some(5))
        // a second label of the same item keeps its first credit
        .label(201, Some(6))
        .label(300, None);
    log
}

#[test]
fn overlapping_model_suggestion_counts_as_human() {
    let state = replay(&scripted().events).unwrap();
    assert_eq!(state.queries[&2].origin, Actor::Human);
    assert_eq!(state.queries[&3].origin, Actor::Model);

    let mut log = Log::new();
    log.report(1, "abc")
        .suggest(1, 1, "ab", Actor::Model)
        .suggest(1, 2, "ab", Actor::Human)
        .suggest(1, 3, "bc", Actor::Model);
    let state = replay(&log.events).unwrap();
    // the later human suggestion absorbs the earlier model one
    assert_eq!(state.queries[&1].origin, Actor::Human);
    assert_eq!(state.queries[&3].origin, Actor::Model);
}

#[test]
fn scripted_session_metrics() {
    let state = replay(&scripted().events).unwrap();
    let m = session_metrics(&state);
    // model-origin queries after overlap: 3, 4, 5
    assert_eq!(m.model_queries_shown, 3);
    assert_eq!(m.model_queries_accepted, 2);
    assert_eq!(m.acceptance_rate, Some(2.0 / 3.0));
    // items credited: 100, 101 -> q1 (human); 102 -> q3, 200, 201 -> q5 (model)
    assert_eq!((m.human_toxic_items, m.model_toxic_items), (2, 3));
    assert_eq!(m.toxic_item_detection_increment, Some(1.5));
    assert_eq!((m.human_hit_queries, m.model_hit_queries), (1, 2));
    assert_eq!(m.hit_query_increment, Some(2.0));
    assert!(state.removed.contains(&100));
}

#[test]
fn ratios_are_absent_without_denominators() {
    let mut log = Log::new();
    log.report(1, "abc");
    let m = session_metrics(&replay(&log.events).unwrap());
    assert_eq!(m.acceptance_rate, None);
    assert_eq!(m.toxic_item_detection_increment, None);
    assert_eq!(m.hit_query_increment, None);

    log.suggest(1, 1, "ab", Actor::Model)
        .search(1, "ab", &[5])
        .label(5, Some(1));
    let m = session_metrics(&replay(&log.events).unwrap());
    assert_eq!(m.acceptance_rate, Some(0.0));
    assert_eq!(m.model_toxic_items, 1);
    assert_eq!(m.toxic_item_detection_increment, None);
}

#[test]
fn observed_rates_and_preference_export() {
    let state = replay(&scripted().events).unwrap();
    assert_eq!(observed_toxic_rate(&state, 1), Some(1.0));
    assert_eq!(observed_toxic_rate(&state, 3), Some(0.5));
    assert_eq!(observed_toxic_rate(&state, 4), None);
    assert_eq!(observed_toxic_rate(&state, 6), Some(0.5));
    // never searched
    assert_eq!(observed_toxic_rate(&state, 2), None);

    let triples = export_preference_pairs(&state, 0.6);
    assert_eq!(triples.len(), 2);
    // report 10: only the searched, accepted k7 clears the threshold; the
    // unsearched K7 is left out, the rejected deal is dispreferred
    assert_eq!(triples[0].content, "k7offer deal");
    assert_eq!(triples[0].preferred, vec!["k7".to_string()]);
    assert_eq!(triples[0].dispreferred, vec!["offer".to_string(), "deal".to_string()]);
    assert_eq!(triples[1].preferred, vec!["zz9".to_string()]);
    assert_eq!(triples[1].dispreferred, vec!["promo".to_string()]);

    let low = export_preference_pairs(&state, 0.05);
    assert_eq!(low.len(), 1);
    assert_eq!(low[0].preferred, vec!["k7".to_string(), "offer".to_string()]);
    assert_eq!(low[0].dispreferred, vec!["deal".to_string()]);
}

#[test]
fn malformed_logs_are_rejected() {
    let mut log = Log::new();
    log.report(1, "a");
    log.events.push(SessionEvent {
        tick: 1,
        actor: Actor::Human,
        kind: EventKind::ReportShown {
            report_id: 2,
            content: "b".into(),
        },
    });
    assert!(matches!(
        replay(&log.events),
        Err(SessionError::NonMonotoneTick { index: 1, .. })
    ));

    let cases: Vec<Log> = vec![
        {
            let mut l = Log::new();
            l.suggest(9, 1, "x", Actor::Model);
            l
        },
        {
            let mut l = Log::new();
            l.report(1, "a").accept(7);
            l
        },
        {
            let mut l = Log::new();
            l.report(1, "a")
                .suggest(1, 1, "a", Actor::Human)
                .suggest(1, 1, "b", Actor::Model);
            l
        },
        {
            let mut l = Log::new();
            l.report(1, "a").remove(4);
            l
        },
        {
            let mut l = Log::new();
            l.report(1, "a").label(4, Some(3));
            l
        },
    ];
    for l in cases {
        assert!(matches!(replay(&l.events), Err(SessionError::Inconsistent { .. })));
    }
}

#[test]
fn events_round_trip_through_json() {
    let log = scripted();
    let json: Vec<String> = log.events.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    assert!(json[1].contains(r#""kind":"query_suggested""#));
    assert!(json[1].contains(r#""origin":"human""#));
    let back: Vec<SessionEvent> = json.iter().map(|j| serde_json::from_str(j).unwrap()).collect();
    assert_eq!(back, log.events);
}
