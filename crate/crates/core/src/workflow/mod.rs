//! End-to-end orchestration: query sessions with progressive events, insight
//! capture with tag mapping, result opening, decisions and guided inquiry.

mod pipeline;
mod session;

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use futures::Stream;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use crate::config::{Config, ConfigError, TimeoutConfig};
use crate::embedding::{EmbedError, Embedder};
use crate::graph::{CardId, GraphStore, ImportOptions, ImportProgress, ImportReport, ProblemCard, StoreError, StoreStats, Timestamp};
use crate::llm::{FilterLevel, InquirySession, InquiryTurn, LlmError, LlmGateway, LlmProvider, ParsedInsight};
use crate::recall::RecallConfig;
use crate::rerank::{LearningMode, SignalParams};
use crate::tagmap::{self, DecisionError, DecisionQueue, MappingDecision, PreparedSuggestion, TagSuggestion, Transition, UserAction};

pub use session::{
    AssessmentStatus, AssessmentView, AssessmentsPayload, ErrorPayload, EventKind, FinalPayload, PreliminaryHit,
    PreliminaryPayload, PresentedResult, QuerySession, RerankedPayload, ResultView, SessionEvent, SessionState,
    StepLog, TagsResolvedPayload, ERROR_STEP, STAGES,
};

use session::SessionHandle;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as Timestamp)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(now: Timestamp) -> Self {
        Self(AtomicI64::new(now))
    }

    pub fn set(&self, now: Timestamp) {
        self.0.store(now, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("note must not be empty")]
    EmptyNote,
    #[error("insight text must not be empty")]
    EmptyInsight,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown card {0}")]
    UnknownCard(CardId),
    #[error("card {card} is not among the results of session {session}")]
    NotInSession { session: String, card: CardId },
    #[error("unknown inquiry {0}")]
    UnknownInquiry(String),
    #[error("an inquiry needs a problem: pass problem_id or problem_text")]
    MissingProblem,
    #[error(transparent)]
    Llm(LlmError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("background task failed: {0}")]
    Task(String),
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownCard(id) => EngineError::UnknownCard(id),
            other => EngineError::Store(other),
        }
    }
}

impl From<LlmError> for EngineError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::EmptyNote => EngineError::EmptyNote,
            other => EngineError::Llm(other),
        }
    }
}

impl From<tokio::task::JoinError> for EngineError {
    fn from(e: tokio::task::JoinError) -> Self {
        EngineError::Task(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineSettings {
    pub recall: RecallConfig,
    pub rerank: SignalParams,
    pub timeouts: TimeoutConfig,
    pub tag_top_n: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            recall: RecallConfig::default(),
            rerank: SignalParams::default(),
            timeouts: TimeoutConfig::default(),
            tag_top_n: tagmap::DEFAULT_TOP_N,
        }
    }
}

impl From<&Config> for EngineSettings {
    fn from(c: &Config) -> Self {
        Self { recall: c.recall.clone(), rerank: c.rerank, timeouts: c.timeouts, tag_top_n: c.tag_mapper.top_n }
    }
}

pub(crate) struct Shared {
    pub store: Arc<GraphStore>,
    pub embedder: Arc<dyn Embedder>,
    pub gateway: LlmGateway,
    pub clock: Arc<dyn Clock>,
    pub settings: EngineSettings,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    decisions: Arc<Mutex<DecisionQueue>>,
    inquiries: RwLock<HashMap<String, Arc<tokio::sync::Mutex<InquirySession>>>>,
    background: Mutex<Vec<JoinHandle<()>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureResult {
    pub card: ProblemCard,
    pub parsed: ParsedInsight,
    pub decisions: Vec<MappingDecision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenAck {
    pub session_id: String,
    pub card_id: CardId,
    pub access_count: u64,
    /// False when this session had already opened the card.
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InquiryStart {
    pub inquiry_id: String,
    pub turn: InquiryTurn,
}

/// Sidecar path holding the decision queue next to a snapshot.
pub fn decisions_path(store_path: &Path) -> PathBuf {
    let mut s = store_path.as_os_str().to_owned();
    s.push(".decisions.json");
    PathBuf::from(s)
}

/// Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Engine {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("store", &self.shared.store).finish_non_exhaustive()
    }
}

fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

impl Engine {
    pub fn new(
        store: Arc<GraphStore>,
        embedder: Arc<dyn Embedder>,
        gateway: LlmGateway,
        clock: Arc<dyn Clock>,
        settings: EngineSettings,
    ) -> Self {
        Self {
            shared: Arc::new(Shared {
                store,
                embedder,
                gateway,
                clock,
                settings,
                sessions: RwLock::new(HashMap::new()),
                decisions: Arc::new(Mutex::new(DecisionQueue::new())),
                inquiries: RwLock::new(HashMap::new()),
                background: Mutex::new(Vec::new()),
            }),
        }
    }

    /// Builds providers from `config`. Call outside an async context when the
    /// external embedding provider is configured.
    pub fn from_config(config: &Config, store: Arc<GraphStore>, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        let embedder = config.build_embedder()?;
        let gateway = LlmGateway::new(config.build_llm()?, config.gateway_config());
        Ok(Self::new(store, embedder, gateway, clock, EngineSettings::from(config)))
    }

    /// Convenience constructor around an explicit provider.
    pub fn with_provider(
        store: Arc<GraphStore>,
        embedder: Arc<dyn Embedder>,
        provider: Arc<dyn LlmProvider>,
        config: &Config,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self::new(store, embedder, LlmGateway::new(provider, config.gateway_config()), clock, EngineSettings::from(config))
    }

    pub fn store(&self) -> &Arc<GraphStore> {
        &self.shared.store
    }

    pub fn now(&self) -> Timestamp {
        self.shared.clock.now()
    }

    pub fn stats(&self) -> StoreStats {
        self.shared.store.stats()
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, EngineError> {
        self.shared.sessions.read().get(id).cloned().ok_or_else(|| EngineError::UnknownSession(id.to_owned()))
    }

    /// Starts a query session and returns its id at once; the pipeline runs
    /// in the background and reports through the session's events.
    pub fn submit_query(&self, query: &str, mode: LearningMode, filter_level: FilterLevel) -> Result<String, EngineError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let session_id = new_id("s");
        let meta = QuerySession {
            session_id: session_id.clone(),
            query_text: query.to_owned(),
            mode,
            filter_level,
            started_at: self.now(),
            state: SessionState::Running,
        };
        let handle = Arc::new(SessionHandle::new(meta));
        self.shared.sessions.write().insert(session_id.clone(), Arc::clone(&handle));
        let shared = Arc::clone(&self.shared);
        tokio::spawn(async move {
            let run = tokio::spawn(pipeline::run(Arc::clone(&shared), Arc::clone(&handle)));
            if let Err(e) = run.await {
                pipeline::abandoned(&shared, &handle, e.to_string());
            }
        });
        Ok(session_id)
    }

    /// Submits a query and waits for its terminal event.
    pub async fn run_query(
        &self,
        query: &str,
        mode: LearningMode,
        filter_level: FilterLevel,
    ) -> Result<(String, Vec<SessionEvent>), EngineError> {
        let id = self.submit_query(query, mode, filter_level)?;
        self.wait_session(&id).await?;
        Ok((id.clone(), self.events_since(&id, 0)?))
    }

    pub async fn wait_session(&self, session_id: &str) -> Result<(), EngineError> {
        self.session(session_id)?.finished().await;
        Ok(())
    }

    pub fn session_info(&self, session_id: &str) -> Result<QuerySession, EngineError> {
        Ok(self.session(session_id)?.meta.lock().clone())
    }

    /// Events with `seq >= since`, for polling clients.
    pub fn events_since(&self, session_id: &str, since: u64) -> Result<Vec<SessionEvent>, EngineError> {
        Ok(self.session(session_id)?.events_since(since))
    }

    /// Replays every event so far, then follows live ones up to the terminal
    /// event.
    pub fn subscribe(&self, session_id: &str) -> Result<impl Stream<Item = SessionEvent> + Send + 'static, EngineError> {
        Ok(self.session(session_id)?.subscribe())
    }

    pub fn get_session_log(&self, session_id: &str) -> Result<Vec<StepLog>, EngineError> {
        Ok(self.session(session_id)?.logs())
    }

    /// Counts an access the first time a session opens one of its results.
    pub fn open_result(&self, session_id: &str, card_id: &CardId) -> Result<OpenAck, EngineError> {
        let handle = self.session(session_id)?;
        let presented = handle.final_cards.lock().as_ref().is_some_and(|s| s.contains(card_id));
        if !presented {
            return Err(EngineError::NotInSession { session: session_id.to_owned(), card: card_id.clone() });
        }
        let mut opened = handle.opened.lock();
        if opened.contains(card_id) {
            let card = self.shared.store.card(card_id).ok_or_else(|| EngineError::UnknownCard(card_id.clone()))?;
            return Ok(OpenAck {
                session_id: session_id.to_owned(),
                card_id: card_id.clone(),
                access_count: card.access_count,
                counted: false,
            });
        }
        let card = self.shared.store.record_access(card_id, self.now())?;
        opened.insert(card_id.clone());
        Ok(OpenAck { session_id: session_id.to_owned(), card_id: card_id.clone(), access_count: card.access_count, counted: true })
    }

    fn spawn_embed(&self, card: &ProblemCard) {
        let store = Arc::clone(&self.shared.store);
        let embedder = Arc::clone(&self.shared.embedder);
        let id = card.id.clone();
        let text = card.searchable_text();
        let limit = self.shared.settings.timeouts.embed();
        let job = tokio::spawn(async move {
            let work = tokio::task::spawn_blocking(move || -> Result<bool, String> {
                let v = embedder.embed(&text).map_err(|e| e.to_string())?;
                store.set_card_embedding(&id, &text, v).map_err(|e| e.to_string())
            });
            match tokio::time::timeout(limit, work).await {
                Ok(Ok(Ok(_))) => {}
                Ok(Ok(Err(e))) => tracing::warn!(error = %e, "background embedding failed"),
                Ok(Err(e)) => tracing::warn!(error = %e, "background embedding task failed"),
                Err(_) => tracing::warn!("background embedding timed out"),
            }
        });
        let mut jobs = self.shared.background.lock();
        jobs.retain(|j| !j.is_finished());
        jobs.push(job);
    }

    /// Waits for every background embedding job started so far.
    pub async fn wait_background(&self) {
        loop {
            let jobs: Vec<_> = std::mem::take(&mut *self.shared.background.lock());
            if jobs.is_empty() {
                return;
            }
            for j in jobs {
                let _ = j.await;
            }
        }
    }

    /// Embeds every card that lacks an embedding, in the background.
    pub fn embed_missing(&self) {
        for id in self.shared.store.unembedded_cards() {
            if let Some(card) = self.shared.store.card(&id) {
                self.spawn_embed(&card);
            }
        }
    }

    /// Parses a note, stores it as a card (embedded in the background) and
    /// queues tag-mapping decisions for its suggested tags.
    pub async fn capture_insight(&self, raw_note: &str) -> Result<CaptureResult, EngineError> {
        let parsed = self.shared.gateway.parse_insight_note(raw_note).await?;
        let card = self.shared.store.create_card(&parsed.problem, &parsed.insight, &[], self.now())?;
        self.spawn_embed(&card);

        let suggestions: Vec<TagSuggestion> = parsed
            .suggested_tags
            .iter()
            .map(|t| TagSuggestion {
                raw_name: t.clone(),
                source_card_id: card.id.clone(),
                problem_context: parsed.problem.clone(),
            })
            .collect();
        let decisions = if suggestions.is_empty() {
            Vec::new()
        } else {
            let embedder = Arc::clone(&self.shared.embedder);
            let prepared = tokio::task::spawn_blocking(move || {
                suggestions
                    .into_iter()
                    .map(|s| PreparedSuggestion::prepare(s, embedder.as_ref()))
                    .collect::<Result<Vec<_>, _>>()
            })
            .await??;
            let proposals =
                tagmap::propose(&self.shared.store, &self.shared.gateway, &prepared, self.shared.settings.tag_top_n).await;
            let mut queue = self.shared.decisions.lock();
            proposals.into_iter().map(|p| queue.enqueue(p)).collect()
        };
        Ok(CaptureResult { card, parsed, decisions })
    }

    /// Appends a timestamped section to a card's insight and re-embeds it in
    /// the background.
    pub fn append_insight(&self, card_id: &CardId, text: &str) -> Result<ProblemCard, EngineError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(EngineError::EmptyInsight);
        }
        let stamp = chrono::DateTime::from_timestamp(self.now(), 0)
            .map(|t| t.format("%Y-%m-%d %H:%M UTC").to_string())
            .unwrap_or_else(|| self.now().to_string());
        let card = self.shared.store.append_insight(card_id, &format!("[{stamp}] {text}"))?;
        self.spawn_embed(&card);
        Ok(card)
    }

    pub fn list_decisions(&self, pending_only: bool) -> Vec<MappingDecision> {
        self.shared.decisions.lock().list(pending_only)
    }

    pub fn decision_log(&self) -> Vec<Transition> {
        self.shared.decisions.lock().log().to_vec()
    }

    pub async fn confirm_decision(&self, decision_id: &str, action: UserAction) -> Result<MappingDecision, EngineError> {
        let store = Arc::clone(&self.shared.store);
        let embedder = Arc::clone(&self.shared.embedder);
        let queue = Arc::clone(&self.shared.decisions);
        let id = decision_id.to_owned();
        let now = self.now();
        let d = tokio::task::spawn_blocking(move || {
            queue.lock().confirm(&store, Some(embedder.as_ref()), &id, action, now)
        })
        .await??;
        Ok(d)
    }

    pub fn decision_queue(&self) -> DecisionQueue {
        self.shared.decisions.lock().clone()
    }

    pub fn restore_decisions(&self, queue: DecisionQueue) {
        *self.shared.decisions.lock() = queue;
    }

    /// Opens a tutoring dialogue about `card_id` and returns the tutor's
    /// opening turn. The problem is a query session, a card, or free text.
    pub async fn start_inquiry(
        &self,
        problem_id: Option<&str>,
        problem_text: Option<&str>,
        card_id: &CardId,
    ) -> Result<InquiryStart, EngineError> {
        let card = self.shared.store.card(card_id).ok_or_else(|| EngineError::UnknownCard(card_id.clone()))?;
        let inquiry_id = new_id("inq");
        let (pid, text) = match (problem_id, problem_text.map(str::trim).filter(|t| !t.is_empty())) {
            (pid, Some(text)) => (pid.map_or_else(|| inquiry_id.clone(), str::to_owned), text.to_owned()),
            (Some(pid), None) => {
                let from_session = self.shared.sessions.read().get(pid).map(|s| s.meta.lock().query_text.clone());
                let text = match from_session {
                    Some(t) => t,
                    None => self
                        .shared
                        .store
                        .card(&CardId::from(pid))
                        .map(|c| c.problem_text)
                        .ok_or(EngineError::MissingProblem)?,
                };
                (pid.to_owned(), text)
            }
            (None, None) => return Err(EngineError::MissingProblem),
        };
        let mut session = InquirySession::new(inquiry_id.clone(), pid, text, &card);
        let turn = self.shared.gateway.inquiry_turn(&mut session, None).await?;
        self.shared.inquiries.write().insert(inquiry_id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        Ok(InquiryStart { inquiry_id, turn })
    }

    /// Sends the user's message and returns the tutor's reply. Turns within one
    /// inquiry are serialized; a failed call leaves the transcript untouched.
    pub async fn inquiry_turn(&self, inquiry_id: &str, text: &str) -> Result<InquiryTurn, EngineError> {
        let session = self
            .shared
            .inquiries
            .read()
            .get(inquiry_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownInquiry(inquiry_id.to_owned()))?;
        let mut s = session.lock().await;
        Ok(self.shared.gateway.inquiry_turn(&mut s, Some(text)).await?)
    }

    pub async fn inquiry_transcript(&self, inquiry_id: &str) -> Result<InquirySession, EngineError> {
        let session = self
            .shared
            .inquiries
            .read()
            .get(inquiry_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownInquiry(inquiry_id.to_owned()))?;
        let s = session.lock().await;
        Ok(s.clone())
    }

    /// Bulk-imports JSONL on the blocking pool, embedding as it goes.
    pub async fn import<R: BufRead + Send + 'static>(
        &self,
        reader: R,
        parallelism: usize,
        progress: impl Fn(ImportProgress) + Send + Sync + 'static,
    ) -> Result<ImportReport, EngineError> {
        let store = Arc::clone(&self.shared.store);
        let embedder = Arc::clone(&self.shared.embedder);
        let now = self.now();
        let report = tokio::task::spawn_blocking(move || {
            let opts = ImportOptions { parallelism, embedder: Some(embedder.as_ref()), now };
            store.bulk_import(reader, &opts, &progress)
        })
        .await??;
        Ok(report)
    }

    /// Writes the snapshot and the decision sidecar.
    pub fn persist(&self, store_path: &Path) -> Result<(), EngineError> {
        self.shared.store.save_snapshot(store_path)?;
        let queue = serde_json::to_vec_pretty(&*self.shared.decisions.lock())
            .map_err(|e| EngineError::Store(StoreError::CorruptSnapshot(e.to_string())))?;
        let side = decisions_path(store_path);
        let tmp = side.with_extension("tmp");
        std::fs::write(&tmp, queue).map_err(StoreError::from)?;
        std::fs::rename(&tmp, &side).map_err(StoreError::from)?;
        Ok(())
    }
}

/// Loads a snapshot and its decision sidecar; a missing snapshot gives an
/// empty store.
pub fn load_state(store_path: &Path) -> Result<(GraphStore, DecisionQueue), StoreError> {
    let store = if store_path.exists() { GraphStore::load_snapshot(store_path)? } else { GraphStore::new() };
    let side = decisions_path(store_path);
    let queue = if side.exists() {
        let text = std::fs::read_to_string(&side)?;
        serde_json::from_str(&text).map_err(|e| StoreError::CorruptSnapshot(format!("{}: {e}", side.display())))?
    } else {
        DecisionQueue::new()
    };
    Ok((store, queue))
}
