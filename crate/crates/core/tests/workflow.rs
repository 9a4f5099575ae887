mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use futures::StreamExt;
use irec_core::config::Config;
use irec_core::graph::{CardId, GraphStore};
use irec_core::llm::{FilterLevel, LlmError, ScriptedLlm};
use irec_core::rerank::LearningMode;
use irec_core::tagmap::{Outcome, UserAction};
use irec_core::workflow::{AssessmentStatus, EngineError, EventKind, STAGES, ERROR_STEP};
use serde_json::json;

const FULL_SEQUENCE: [EventKind; 5] = [
    EventKind::PreliminaryResults,
    EventKind::TagsResolved,
    EventKind::RerankedResults,
    EventKind::AssessmentsReady,
    EventKind::FinalResults,
];

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn scenario_ranks_usub_first_and_filters_distractor() {
    let s = scenario().await;
    let (id, events) = s.engine.run_query(&scenario_query(), LearningMode::Balanced, FilterLevel::Strict).await.unwrap();
    assert_eq!(kinds(&events), FULL_SEQUENCE);
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
        assert_eq!(e.session_id, id);
    }
    let reranked: irec_core::workflow::RerankedPayload = serde_json::from_value(events[2].payload.clone()).unwrap();
    assert_eq!(reranked.results[0].ranked.card_id, s.usub);
    assert!(reranked.results.iter().any(|r| r.ranked.card_id == s.double));

    let assessments: irec_core::workflow::AssessmentsPayload = serde_json::from_value(events[3].payload.clone()).unwrap();
    let score = |id: &CardId| {
        assessments.assessments.iter().find(|a| &a.card_id == id).unwrap().assessment.as_ref().unwrap().score.get()
    };
    assert_eq!(score(&s.usub), 1);
    assert_eq!(score(&s.double), 3);

    let fin = final_payload(&events);
    assert_eq!(fin.results.len(), 1);
    assert_eq!(fin.results[0].view.ranked.card_id, s.usub);
    assert!(!fin.provide_nothing);

    let before = s.engine.store().card(&s.usub).unwrap().access_count;
    let ack = s.engine.open_result(&id, &s.usub).unwrap();
    assert!(ack.counted);
    assert_eq!(ack.access_count, before + 1);
    let again = s.engine.open_result(&id, &s.usub).unwrap();
    assert!(!again.counted);
    assert_eq!(s.engine.store().card(&s.usub).unwrap().access_count, before + 1);
    assert!(matches!(s.engine.open_result(&id, &s.double), Err(EngineError::NotInSession { .. })));
    assert!(matches!(s.engine.open_result("nope", &s.usub), Err(EngineError::UnknownSession(_))));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn loose_level_keeps_distractor() {
    let s = scenario().await;
    let (_, events) = s.engine.run_query(&scenario_query(), LearningMode::Balanced, FilterLevel::Loose).await.unwrap();
    let fin = final_payload(&events);
    let ids: Vec<_> = fin.results.iter().map(|r| r.view.ranked.card_id.clone()).collect();
    assert_eq!(ids, vec![s.usub.clone(), s.double.clone()]);
    assert_eq!(fin.results.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2]);
}

#[tokio::test]
async fn empty_store_provides_nothing() {
    let (engine, _) = engine_with(GraphStore::new(), hashing(), Arc::new(ScriptedLlm::new()), &Config::default());
    let (_, events) = engine.run_query("anything", LearningMode::Learning, FilterLevel::Strict).await.unwrap();
    assert_eq!(kinds(&events), FULL_SEQUENCE);
    let fin = final_payload(&events);
    assert!(fin.results.is_empty() && fin.provide_nothing);
    assert!(matches!(engine.submit_query("  ", LearningMode::Learning, FilterLevel::Strict), Err(EngineError::EmptyQuery)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn llm_outage_fails_open() {
    let s = scenario().await;
    s.stub.set_down(true);
    let (id, events) = s.engine.run_query(&scenario_query(), LearningMode::Balanced, FilterLevel::Strict).await.unwrap();
    let fin = final_payload(&events);
    assert_eq!(fin.results.len(), 2);
    assert!(fin.results.iter().all(|r| r.status == AssessmentStatus::Unassessed && r.assessment.is_none()));
    let log = s.engine.get_session_log(&id).unwrap();
    let assess = log.iter().find(|l| l.step_name == "assess").unwrap();
    assert!(assess.detail.contains("2 unassessed"), "{}", assess.detail);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn session_log_has_every_stage() {
    let s = scenario().await;
    let (id, _) = s.engine.run_query(&scenario_query(), LearningMode::Review, FilterLevel::Strict).await.unwrap();
    let log = s.engine.get_session_log(&id).unwrap();
    for stage in STAGES {
        assert_eq!(log.iter().filter(|l| l.step_name == stage).count(), 1, "{stage}");
    }
    assert!(log.iter().all(|l| l.duration_ms >= 0.0 && l.session_id == id));
    assert!(!log.iter().any(|l| l.step_name == ERROR_STEP));
    assert!(matches!(s.engine.get_session_log("missing"), Err(EngineError::UnknownSession(_))));
}

#[tokio::test]
async fn embedding_failure_fails_session_with_marker() {
    let store = GraphStore::new();
    store.create_card("∫x dx", "power rule", &[], T0).unwrap();
    let (engine, _) = engine_with(store, Arc::new(DownEmbedder), Arc::new(ScriptedLlm::new()), &Config::default());
    let (id, events) = engine.run_query("x dx", LearningMode::Balanced, FilterLevel::Strict).await.unwrap();
    assert_eq!(kinds(&events), vec![EventKind::PreliminaryResults, EventKind::Error]);
    assert_eq!(events[1].payload["stage"], "embed");
    assert_eq!(events[1].payload["partial_results"]["results"].as_array().unwrap().len(), 1);
    let log = engine.get_session_log(&id).unwrap();
    let names: Vec<_> = log.iter().map(|l| l.step_name.as_str()).collect();
    assert_eq!(names, vec!["recall.fulltext", "embed", ERROR_STEP]);
    assert_eq!(engine.session_info(&id).unwrap().state, irec_core::workflow::SessionState::Failed);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn slow_embedding_degrades_to_lexical_channels() {
    let store = GraphStore::new();
    store.create_card("∫x dx", "power rule", &[], T0).unwrap();
    let mut config = Config::default();
    config.timeouts.embed_ms = 50;
    let slow = Arc::new(SlowEmbedder(Duration::from_millis(400)));
    let (engine, _) = engine_with(store, slow, Arc::new(ScriptedLlm::new()), &config);
    let (id, events) = engine.run_query("x dx", LearningMode::Balanced, FilterLevel::Strict).await.unwrap();
    let fin = final_payload(&events);
    assert_eq!(fin.results.len(), 1);
    let log = engine.get_session_log(&id).unwrap();
    let vector = log.iter().find(|l| l.step_name == "recall.vector").unwrap();
    assert!(vector.detail.starts_with("skipped"));
    assert!(log.iter().find(|l| l.step_name == "embed").unwrap().detail.contains("timed out"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn subscription_replays_and_terminates() {
    let s = scenario().await;
    let id = s.engine.submit_query(&scenario_query(), LearningMode::Balanced, FilterLevel::Strict).unwrap();
    let streamed: Vec<_> = s.engine.subscribe(&id).unwrap().collect().await;
    assert_eq!(kinds(&streamed), FULL_SEQUENCE);
    assert_eq!(streamed, s.engine.events_since(&id, 0).unwrap());
    // late subscribers still see everything
    let late: Vec<_> = s.engine.subscribe(&id).unwrap().collect().await;
    assert_eq!(late, streamed);
    assert_eq!(s.engine.events_since(&id, 3).unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn final_payload_is_deterministic() {
    let s = scenario().await;
    let mut payloads = Vec::new();
    for _ in 0..5 {
        let (_, events) = s.engine.run_query(&scenario_query(), LearningMode::Balanced, FilterLevel::Loose).await.unwrap();
        payloads.push(serde_json::to_string(&events.last().unwrap().payload).unwrap());
    }
    assert!(payloads.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn concurrent_sessions_each_terminate_once() {
    let s = scenario().await;
    let ids: Vec<_> = (0..16)
        .map(|i| {
            let mode = LearningMode::ALL[i % 3];
            s.engine.submit_query(&scenario_query(), mode, FilterLevel::Strict).unwrap()
        })
        .collect();
    for id in &ids {
        s.engine.wait_session(id).await.unwrap();
        let events = s.engine.events_since(id, 0).unwrap();
        assert_eq!(events.iter().filter(|e| e.kind.is_terminal()).count(), 1);
        assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    }
}

#[tokio::test]
async fn capture_without_tags_and_before_embedding() {
    let slow = Arc::new(SlowEmbedder(Duration::from_millis(300)));
    let (engine, _) = engine_with(GraphStore::new(), slow, Arc::new(ScriptedLlm::new()), &Config::default());
    let r = engine.capture_insight("zyxglyph problem ||| an insight with no tags").await.unwrap();
    assert!(r.decisions.is_empty());
    assert_eq!(r.card.problem_text, "zyxglyph problem");
    assert!(engine.store().card(&r.card.id).unwrap().embedding.is_none());
    let hits = engine.store().fulltext_search("zyxglyph", 5);
    assert_eq!(hits[0].0, r.card.id);
    engine.wait_background().await;
    assert!(engine.store().card(&r.card.id).unwrap().embedding.is_some());
    assert!(matches!(engine.capture_insight("   ").await, Err(EngineError::EmptyNote)));
}

#[tokio::test]
async fn capture_queues_decisions_and_accept_links_tag() {
    let s = scenario().await;
    let pending = s.engine.list_decisions(true);
    assert!(pending.iter().any(|d| d.suggestion.raw_name == "u-substitution" && d.suggestion.source_card_id == s.usub));
    let d = pending.iter().find(|d| d.suggestion.raw_name == "u-substitution").unwrap();
    assert!(matches!(d.outcome, Outcome::CreateUnder { .. }));
    let done = s.engine.confirm_decision(&d.id, UserAction::Accept).await.unwrap();
    let tag = done.applied_tag_id.unwrap();
    assert!(s.engine.store().card(&s.usub).unwrap().tag_ids.contains(&tag));
    assert!(s.engine.store().tag(&tag).unwrap().embedding.is_some());
    assert_eq!(s.engine.decision_log().len(), 1);
    assert!(matches!(
        s.engine.confirm_decision(&d.id, UserAction::Veto).await,
        Err(EngineError::Decision(irec_core::tagmap::DecisionError::AlreadyConfirmed(_)))
    ));
}

#[tokio::test]
async fn append_reindexes_and_reembeds() {
    let s = scenario().await;
    let before = s.engine.store().card(&s.usub).unwrap();
    let card = s.engine.append_insight(&s.usub, "chainruleinverse is the real pattern").unwrap();
    assert!(card.insight_text.starts_with(&before.insight_text));
    assert!(card.insight_text.contains("chainruleinverse"));
    assert!(card.insight_text.contains("UTC]"));
    assert_eq!(s.engine.store().fulltext_search("chainruleinverse", 3)[0].0, s.usub);
    s.engine.wait_background().await;
    let after = s.engine.store().card(&s.usub).unwrap();
    assert_ne!(after.embedding, before.embedding);
    assert!(matches!(s.engine.append_insight(&CardId::from("ghost"), "x"), Err(EngineError::UnknownCard(_))));
}

#[tokio::test]
async fn inquiry_dialogue() {
    let s = scenario().await;
    let (sid, _) = s.engine.run_query(&scenario_query(), LearningMode::Balanced, FilterLevel::Strict).await.unwrap();
    let start = s.engine.start_inquiry(Some(&sid), None, &s.usub).await.unwrap();
    assert_eq!(start.turn.context_refs.current_problem_id, sid);
    assert_eq!(start.turn.context_refs.recalled_card_id, s.usub);
    assert!(start.turn.text.contains(&scenario_query()));
    let reply = s.engine.inquiry_turn(&start.inquiry_id, "the derivative of x² is 2x").await.unwrap();
    assert!(reply.text.contains("the derivative of x² is 2x"));
    let last = s.stub.calls().pop().unwrap();
    assert_eq!(last["history"].as_array().unwrap().len(), 1);

    s.stub.set_down(true);
    assert!(matches!(
        s.engine.inquiry_turn(&start.inquiry_id, "hmm").await,
        Err(EngineError::Llm(LlmError::Unavailable(_)))
    ));
    assert_eq!(s.engine.inquiry_transcript(&start.inquiry_id).await.unwrap().turns.len(), 3);
    s.stub.set_down(false);
    s.engine.inquiry_turn(&start.inquiry_id, "hmm").await.unwrap();
    assert_eq!(s.engine.inquiry_transcript(&start.inquiry_id).await.unwrap().turns.len(), 5);

    assert!(matches!(s.engine.start_inquiry(None, None, &s.usub).await, Err(EngineError::MissingProblem)));
    assert!(s.engine.start_inquiry(None, Some("∫x·cos(x²)dx"), &s.usub).await.is_ok());
    assert!(matches!(s.engine.inquiry_turn("inq-missing", "x").await, Err(EngineError::UnknownInquiry(_))));
}

#[tokio::test]
async fn all_scored_three_provides_nothing() {
    let s = scenario().await;
    // A fresh stub: fixtures would win over the responder.
    let stub = Arc::new(ScriptedLlm::new().with_responder(|r| {
        (r["task"] == "assess_similarity").then(|| json!({"score": 3, "rationale": "unrelated"}))
    }));
    let store = GraphStore::from_snapshot(s.engine.store().snapshot()).unwrap();
    let (engine, _) = engine_with(store, hashing(), stub, &Config::default());
    let (_, events) = engine.run_query(&scenario_query(), LearningMode::Balanced, FilterLevel::Strict).await.unwrap();
    let fin = final_payload(&events);
    assert!(fin.results.is_empty() && fin.provide_nothing);
}

#[tokio::test]
async fn persist_and_reload_state() {
    let s = scenario().await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.json");
    s.engine.persist(&path).unwrap();
    let (store, queue) = irec_core::workflow::load_state(&path).unwrap();
    assert_eq!(store.snapshot(), s.engine.store().snapshot());
    assert_eq!(queue, s.engine.decision_queue());
    let (empty, q) = irec_core::workflow::load_state(&dir.path().join("none.json")).unwrap();
    assert_eq!(empty.stats().cards, 0);
    assert!(q.list(false).is_empty());
}
