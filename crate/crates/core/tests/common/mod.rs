#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use irec_core::config::Config;
use irec_core::embedding::{EmbedError, Embedder, EmbeddingVector, HashingEmbedder};
use irec_core::graph::{CardId, GraphStore, Timestamp};
use irec_core::llm::ScriptedLlm;
use irec_core::workflow::{Engine, EventKind, FinalPayload, ManualClock, SessionEvent};

pub const T0: Timestamp = 1_760_000_000;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenario")
}

pub fn scenario_file(name: &str) -> String {
    std::fs::read_to_string(scenario_dir().join(name)).unwrap()
}

pub fn scenario_query() -> String {
    scenario_file("query.txt").trim().to_owned()
}

pub fn scenario_stub() -> Arc<ScriptedLlm> {
    Arc::new(ScriptedLlm::from_dir(&scenario_dir().join("llm")).unwrap())
}

pub fn engine_with(
    store: GraphStore,
    embedder: Arc<dyn Embedder>,
    stub: Arc<ScriptedLlm>,
    config: &Config,
) -> (Engine, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(T0));
    let engine = Engine::with_provider(Arc::new(store), embedder, stub, config, clock.clone());
    (engine, clock)
}

pub fn hashing() -> Arc<dyn Embedder> {
    Arc::new(HashingEmbedder::new(256))
}

pub struct Scenario {
    pub engine: Engine,
    pub clock: Arc<ManualClock>,
    pub stub: Arc<ScriptedLlm>,
    pub usub: CardId,
    pub double: CardId,
}

/// Captures the u-substitution note, imports the double-integral distractor
/// and waits for background embeddings.
pub async fn scenario() -> Scenario {
    let stub = scenario_stub();
    let (engine, clock) = engine_with(GraphStore::with_seed(7), hashing(), stub.clone(), &Config::default());
    let captured = engine.capture_insight(&scenario_file("note.txt")).await.unwrap();
    assert!(captured.parsed.complete);
    clock.advance(86_400);
    let report = engine
        .import(std::io::Cursor::new(scenario_file("distractor.jsonl")), 1, |_| {})
        .await
        .unwrap();
    assert_eq!(report.imported, 1);
    engine.wait_background().await;
    let double = engine
        .store()
        .snapshot()
        .cards
        .into_iter()
        .find(|c| c.problem_text.starts_with('∬'))
        .unwrap()
        .id;
    clock.advance(14 * 86_400);
    Scenario { engine, clock, stub, usub: captured.card.id, double }
}

pub fn final_payload(events: &[SessionEvent]) -> FinalPayload {
    let last = events.last().expect("at least one event");
    assert_eq!(last.kind, EventKind::FinalResults, "terminal event: {:?}", last.payload);
    serde_json::from_value(last.payload.clone()).unwrap()
}

pub fn kinds(events: &[SessionEvent]) -> Vec<EventKind> {
    events.iter().map(|e| e.kind).collect()
}

/// Embedder that always fails like an unreachable remote provider.
pub struct DownEmbedder;

impl Embedder for DownEmbedder {
    fn dim(&self) -> usize {
        256
    }

    fn embed(&self, _: &str) -> Result<EmbeddingVector, EmbedError> {
        Err(EmbedError::ProviderUnavailable("connection refused".into()))
    }
}

/// Hashing embedder that sleeps before answering.
pub struct SlowEmbedder(pub Duration);

impl Embedder for SlowEmbedder {
    fn dim(&self) -> usize {
        256
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        std::thread::sleep(self.0);
        HashingEmbedder::new(256).embed(text)
    }
}
