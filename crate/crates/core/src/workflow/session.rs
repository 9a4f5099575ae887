//! Query sessions: ordered event log, step logs and live subscription.

use std::collections::HashSet;
use std::sync::Arc;

use futures::Stream;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::watch;

use crate::graph::{CardId, Timestamp};
use crate::llm::{FilterLevel, SimilarityAssessment};
use crate::recall::EntryTag;
use crate::rerank::{LearningMode, RankedResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySession {
    pub session_id: String,
    pub query_text: String,
    pub mode: LearningMode,
    pub filter_level: FilterLevel,
    pub started_at: Timestamp,
    pub state: SessionState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PreliminaryResults,
    TagsResolved,
    RerankedResults,
    AssessmentsReady,
    FinalResults,
    Error,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::FinalResults | EventKind::Error)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::PreliminaryResults => "preliminary_results",
            EventKind::TagsResolved => "tags_resolved",
            EventKind::RerankedResults => "reranked_results",
            EventKind::AssessmentsReady => "assessments_ready",
            EventKind::FinalResults => "final_results",
            EventKind::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session_id: String,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub emitted_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub session_id: String,
    pub step_name: String,
    pub duration_ms: f64,
    pub detail: String,
}

pub const STAGES: [&str; 8] =
    ["embed", "recall.vector", "recall.fulltext", "recall.tag", "fuse", "rerank", "assess", "filter"];
pub const ERROR_STEP: &str = "error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreliminaryHit {
    pub card_id: CardId,
    pub score: f64,
    pub problem_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreliminaryPayload {
    pub results: Vec<PreliminaryHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagsResolvedPayload {
    pub entry_tags: Vec<EntryTag>,
    pub expanded: usize,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    #[serde(flatten)]
    pub ranked: RankedResult,
    pub problem_text: String,
    pub insight_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedPayload {
    pub results: Vec<ResultView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssessmentStatus {
    Assessed,
    Unassessed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentView {
    pub card_id: CardId,
    pub status: AssessmentStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<SimilarityAssessment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentsPayload {
    pub assessments: Vec<AssessmentView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentedResult {
    pub rank: usize,
    #[serde(flatten)]
    pub view: ResultView,
    pub status: AssessmentStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<SimilarityAssessment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPayload {
    pub mode: LearningMode,
    pub filter_level: FilterLevel,
    /// True when nothing cleared the filter.
    pub provide_nothing: bool,
    pub results: Vec<PresentedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub stage: String,
    pub message: String,
    /// Last results computed before the failure, if any.
    pub partial_results: Value,
}

pub(crate) struct SessionHandle {
    pub meta: Mutex<QuerySession>,
    events: Mutex<Vec<SessionEvent>>,
    logs: Mutex<Vec<StepLog>>,
    notify: watch::Sender<usize>,
    pub final_cards: Mutex<Option<HashSet<CardId>>>,
    pub opened: Mutex<HashSet<CardId>>,
}

impl SessionHandle {
    pub fn new(meta: QuerySession) -> Self {
        Self {
            meta: Mutex::new(meta),
            events: Mutex::new(Vec::new()),
            logs: Mutex::new(Vec::new()),
            notify: watch::channel(0).0,
            final_cards: Mutex::new(None),
            opened: Mutex::new(HashSet::new()),
        }
    }

    pub fn id(&self) -> String {
        self.meta.lock().session_id.clone()
    }

    /// Appends an event unless the session already ended. Returns whether it
    /// was recorded.
    pub fn emit(&self, kind: EventKind, payload: Value, now: Timestamp) -> bool {
        let session_id = self.id();
        let mut events = self.events.lock();
        if events.last().is_some_and(|e| e.kind.is_terminal()) {
            return false;
        }
        let seq = events.len() as u64;
        events.push(SessionEvent { session_id, seq, kind, payload, emitted_at: now });
        if kind.is_terminal() {
            self.meta.lock().state =
                if kind == EventKind::FinalResults { SessionState::Complete } else { SessionState::Failed };
        }
        let n = events.len();
        drop(events);
        self.notify.send_replace(n);
        true
    }

    pub fn log(&self, step: &str, duration_ms: f64, detail: impl Into<String>) {
        self.logs.lock().push(StepLog {
            session_id: self.id(),
            step_name: step.to_owned(),
            duration_ms: duration_ms.max(0.0),
            detail: detail.into(),
        });
    }

    pub fn logs(&self) -> Vec<StepLog> {
        self.logs.lock().clone()
    }

    pub fn events_since(&self, since: u64) -> Vec<SessionEvent> {
        self.events.lock().iter().skip(since as usize).cloned().collect()
    }

    pub fn is_finished(&self) -> bool {
        self.events.lock().last().is_some_and(|e| e.kind.is_terminal())
    }

    /// Every event from the first, then live ones, ending after the terminal
    /// event.
    pub fn subscribe(self: &Arc<Self>) -> impl Stream<Item = SessionEvent> + Send + 'static {
        let rx = self.notify.subscribe();
        let state = (Arc::clone(self), rx, 0u64, false);
        futures::stream::unfold(state, |(handle, mut rx, next, done)| async move {
            if done {
                return None;
            }
            loop {
                if let Some(ev) = handle.events_since(next).into_iter().next() {
                    let terminal = ev.kind.is_terminal();
                    return Some((ev, (handle, rx, next + 1, terminal)));
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        })
    }

    /// Resolves once the terminal event has been emitted.
    pub async fn finished(&self) {
        let mut rx = self.notify.subscribe();
        while !self.is_finished() {
            if rx.changed().await.is_err() {
                return;
            }
        }
    }
}
