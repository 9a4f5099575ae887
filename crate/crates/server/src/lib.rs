//! HTTP/JSON API over a workflow [`Engine`].
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/query` | `{query, mode?, filter_level?}` | `202 {session_id}` |
//! | GET | `/sessions/{id}` | | session metadata |
//! | GET | `/sessions/{id}/events` | | server-sent events, one per session event |
//! | GET | `/sessions/{id}/events/poll?since=n` | | `{events, done}` |
//! | GET | `/sessions/{id}/log` | | step logs |
//! | POST | `/sessions/{id}/open` | `{card_id}` | access acknowledgment |
//! | POST | `/insights` | `{note}` | `201` card, parse and pending decisions |
//! | GET | `/cards/{id}` | | card |
//! | POST | `/cards/{id}/insights` | `{text}` | updated card |
//! | GET | `/decisions?pending=true` | | decisions |
//! | POST | `/decisions/{id}` | `{action: accept\|veto\|modify, outcome?}` | decision |
//! | POST | `/inquiry` | `{problem_id?, problem_text?, card_id}` | `201 {inquiry_id, turn}` |
//! | GET | `/inquiry/{id}` | | transcript |
//! | POST | `/inquiry/{id}/turns` | `{text}` | tutor turn |
//! | POST | `/import?parallelism=n` | JSONL | import report |
//! | GET | `/stats` | | store counts |
//! | GET | `/tags` | | tag hierarchy, without embeddings |
//!
//! Errors are `{"error": code, "message": text}`.

use std::convert::Infallible;
use std::future::Future;
use std::io::Cursor;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use irec_core::graph::{CardId, StoreError};
use irec_core::llm::{FilterLevel, LlmError};
use irec_core::rerank::LearningMode;
use irec_core::tagmap::{DecisionError, UserAction};
use irec_core::workflow::{Engine, EngineError, SessionEvent};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// An [`EngineError`] rendered as a JSON response.
#[derive(Debug)]
pub struct ApiError(pub EngineError);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        ApiError(e)
    }
}

fn status_and_code(e: &EngineError) -> (StatusCode, &'static str) {
    use EngineError as E;
    match e {
        E::EmptyQuery => (StatusCode::BAD_REQUEST, "empty_query"),
        E::EmptyNote => (StatusCode::BAD_REQUEST, "empty_note"),
        E::EmptyInsight => (StatusCode::BAD_REQUEST, "empty_insight"),
        E::MissingProblem => (StatusCode::BAD_REQUEST, "missing_problem"),
        E::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
        E::UnknownCard(_) => (StatusCode::NOT_FOUND, "unknown_card"),
        E::UnknownInquiry(_) => (StatusCode::NOT_FOUND, "unknown_inquiry"),
        E::NotInSession { .. } => (StatusCode::CONFLICT, "not_in_session"),
        E::Decision(DecisionError::UnknownDecision(_)) => (StatusCode::NOT_FOUND, "unknown_decision"),
        E::Decision(DecisionError::AlreadyConfirmed(_)) => (StatusCode::CONFLICT, "already_confirmed"),
        E::Decision(DecisionError::Store(
            StoreError::UnknownTag(_) | StoreError::UnknownParent(_) | StoreError::UnknownCard(_) | StoreError::EmptyTagName,
        )) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_outcome"),
        E::Llm(LlmError::Unavailable(_) | LlmError::Timeout(_)) => (StatusCode::SERVICE_UNAVAILABLE, "llm_unavailable"),
        E::Llm(LlmError::Malformed(_)) => (StatusCode::BAD_GATEWAY, "llm_malformed"),
        E::Embed(_) => (StatusCode::SERVICE_UNAVAILABLE, "embedding_unavailable"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = status_and_code(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(json!({ "error": code, "message": self.0.to_string() }))).into_response()
    }
}

/// Largest accepted JSONL upload.
pub const IMPORT_BODY_LIMIT: usize = 256 * 1024 * 1024;

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    #[serde(default = "default_mode")]
    pub mode: LearningMode,
    #[serde(default = "default_level")]
    pub filter_level: FilterLevel,
}

fn default_mode() -> LearningMode {
    LearningMode::Balanced
}

fn default_level() -> FilterLevel {
    FilterLevel::Strict
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryAccepted {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PollResponse {
    pub events: Vec<SessionEvent>,
    pub done: bool,
}

#[derive(Debug, Deserialize)]
struct SinceParam {
    #[serde(default)]
    since: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenRequest {
    pub card_id: CardId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoteRequest {
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextRequest {
    pub text: String,
}

#[derive(Debug, Deserialize)]
struct PendingParam {
    #[serde(default)]
    pending: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InquiryRequest {
    #[serde(default)]
    pub problem_id: Option<String>,
    #[serde(default)]
    pub problem_text: Option<String>,
    pub card_id: CardId,
}

#[derive(Debug, Deserialize)]
struct ImportParam {
    #[serde(default)]
    parallelism: Option<usize>,
}

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/query", post(submit_query))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/events/poll", get(poll_events))
        .route("/sessions/{id}/log", get(session_log))
        .route("/sessions/{id}/open", post(open_result))
        .route("/insights", post(capture))
        .route("/cards/{id}", get(get_card))
        .route("/cards/{id}/insights", post(append))
        .route("/decisions", get(list_decisions))
        .route("/decisions/{id}", post(confirm_decision))
        .route("/inquiry", post(start_inquiry))
        .route("/inquiry/{id}", get(inquiry_transcript))
        .route("/inquiry/{id}/turns", post(inquiry_turn))
        .route("/import", post(import).layer(DefaultBodyLimit::max(IMPORT_BODY_LIMIT)))
        .route("/stats", get(stats))
        .route("/tags", get(tags))
        .with_state(engine)
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    engine: Engine,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).with_graceful_shutdown(shutdown).await
}

async fn submit_query(State(engine): State<Engine>, Json(req): Json<QueryRequest>) -> ApiResult<impl IntoResponse> {
    let session_id = engine.submit_query(&req.query, req.mode, req.filter_level)?;
    Ok((StatusCode::ACCEPTED, Json(QueryAccepted { session_id })))
}

async fn session_info(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.session_info(&id)?))
}

fn to_sse(ev: SessionEvent) -> Result<Event, Infallible> {
    let data = serde_json::to_string(&ev).expect("events serialize");
    Ok(Event::default().id(ev.seq.to_string()).event(ev.kind.as_str()).data(data))
}

/// Streams the session's events. A reconnecting client resumes after its
/// `Last-Event-ID`, or after `?since=n`.
async fn session_events(
    State(engine): State<Engine>,
    Path(id): Path<String>,
    Query(q): Query<SinceParam>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|last| last + 1);
    let since = q.since.or(resume).unwrap_or(0);
    let stream = engine.subscribe(&id)?.filter(move |e| futures::future::ready(e.seq >= since)).map(to_sse);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn poll_events(
    State(engine): State<Engine>,
    Path(id): Path<String>,
    Query(q): Query<SinceParam>,
) -> ApiResult<Json<PollResponse>> {
    let events = engine.events_since(&id, q.since.unwrap_or(0))?;
    let done = engine.events_since(&id, 0)?.last().is_some_and(|e| e.kind.is_terminal());
    Ok(Json(PollResponse { events, done }))
}

async fn session_log(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.get_session_log(&id)?))
}

async fn open_result(
    State(engine): State<Engine>,
    Path(id): Path<String>,
    Json(req): Json<OpenRequest>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.open_result(&id, &req.card_id)?))
}

async fn capture(State(engine): State<Engine>, Json(req): Json<NoteRequest>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(engine.capture_insight(&req.note).await?)))
}

async fn get_card(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = CardId::from(id);
    engine.store().card(&id).map(Json).ok_or_else(|| ApiError(EngineError::UnknownCard(id)))
}

async fn append(
    State(engine): State<Engine>,
    Path(id): Path<String>,
    Json(req): Json<TextRequest>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.append_insight(&CardId::from(id), &req.text)?))
}

async fn list_decisions(State(engine): State<Engine>, Query(q): Query<PendingParam>) -> impl IntoResponse {
    Json(engine.list_decisions(q.pending))
}

async fn confirm_decision(
    State(engine): State<Engine>,
    Path(id): Path<String>,
    Json(action): Json<UserAction>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.confirm_decision(&id, action).await?))
}

async fn start_inquiry(State(engine): State<Engine>, Json(req): Json<InquiryRequest>) -> ApiResult<impl IntoResponse> {
    let start = engine.start_inquiry(req.problem_id.as_deref(), req.problem_text.as_deref(), &req.card_id).await?;
    Ok((StatusCode::CREATED, Json(start)))
}

async fn inquiry_transcript(State(engine): State<Engine>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.inquiry_transcript(&id).await?))
}

async fn inquiry_turn(
    State(engine): State<Engine>,
    Path(id): Path<String>,
    Json(req): Json<TextRequest>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.inquiry_turn(&id, &req.text).await?))
}

async fn import(State(engine): State<Engine>, Query(q): Query<ImportParam>, body: String) -> ApiResult<impl IntoResponse> {
    let parallelism = q.parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(Json(engine.import(Cursor::new(body), parallelism, |_| {}).await?))
}

async fn stats(State(engine): State<Engine>) -> impl IntoResponse {
    Json(engine.stats())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagView {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub level: u32,
}

async fn tags(State(engine): State<Engine>) -> impl IntoResponse {
    let tags: Vec<TagView> = engine
        .store()
        .tags()
        .into_iter()
        .map(|t| TagView {
            id: t.id.to_string(),
            name: t.name,
            parent_id: t.parent_id.map(|p| p.to_string()),
            level: t.level,
        })
        .collect();
    Json(tags)
}
