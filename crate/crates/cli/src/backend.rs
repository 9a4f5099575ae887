//! Where commands run: against a local store, or against a running server.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use irec_core::graph::{CardId, ImportProgress, ImportReport, ProblemCard, StoreStats};
use irec_core::llm::{FilterLevel, InquiryTurn};
use irec_core::rerank::LearningMode;
use irec_core::tagmap::{MappingDecision, UserAction};
use irec_core::workflow::{CaptureResult, Engine, EngineError, InquiryStart, OpenAck, SessionEvent};
use irec_server::{InquiryRequest, NoteRequest, OpenRequest, QueryAccepted, QueryRequest, TagView, TextRequest};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// An error that maps to a specific process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn engine_failure(e: EngineError) -> anyhow::Error {
    let code = match e {
        EngineError::EmptyNote => 2,
        _ => 1,
    };
    Failure::new(code, e.to_string()).into()
}

pub enum Backend {
    Embedded { engine: Engine, store_path: PathBuf },
    Client { http: reqwest::Client, base: String },
}

impl Backend {
    pub fn client(base: &str) -> Self {
        Backend::Client { http: reqwest::Client::new(), base: base.trim_end_matches('/').to_owned() }
    }

    /// Flushes background work and writes the store back to disk.
    pub async fn finish(&self) -> Result<()> {
        if let Backend::Embedded { engine, store_path } = self {
            engine.wait_background().await;
            engine.persist(store_path).with_context(|| format!("writing {}", store_path.display()))?;
        }
        Ok(())
    }

    pub async fn capture(&self, note: &str) -> Result<CaptureResult> {
        match self {
            Backend::Embedded { engine, .. } => engine.capture_insight(note).await.map_err(engine_failure),
            Backend::Client { http, base } => {
                send(http.post(format!("{base}/insights")).json(&NoteRequest { note: note.to_owned() })).await
            }
        }
    }

    /// Runs a query to completion, handing each event to `on_event` as it arrives.
    pub async fn query(
        &self,
        text: &str,
        mode: LearningMode,
        filter_level: FilterLevel,
        mut on_event: impl FnMut(&SessionEvent),
    ) -> Result<(String, Vec<SessionEvent>)> {
        match self {
            Backend::Embedded { engine, .. } => {
                let (id, events) = engine.run_query(text, mode, filter_level).await.map_err(engine_failure)?;
                events.iter().for_each(&mut on_event);
                Ok((id, events))
            }
            Backend::Client { http, base } => {
                let req = QueryRequest { query: text.to_owned(), mode, filter_level };
                let QueryAccepted { session_id } = send(http.post(format!("{base}/query")).json(&req)).await?;
                let events = stream_events(http, base, &session_id, &mut on_event).await?;
                Ok((session_id, events))
            }
        }
    }

    pub async fn open(&self, session_id: &str, card_id: &CardId) -> Result<OpenAck> {
        match self {
            Backend::Embedded { engine, .. } => engine.open_result(session_id, card_id).map_err(engine_failure),
            Backend::Client { http, base } => {
                let req = OpenRequest { card_id: card_id.clone() };
                send(http.post(format!("{base}/sessions/{session_id}/open")).json(&req)).await
            }
        }
    }

    pub async fn import(
        &self,
        reader: Box<dyn BufRead + Send>,
        parallelism: usize,
        progress: impl Fn(ImportProgress) + Send + Sync + 'static,
    ) -> Result<ImportReport> {
        match self {
            Backend::Embedded { engine, .. } => engine.import(reader, parallelism, progress).await.map_err(engine_failure),
            Backend::Client { http, base } => {
                let mut body = String::new();
                let mut reader = reader;
                reader.read_to_string(&mut body).context("reading import input")?;
                let url = format!("{base}/import?parallelism={parallelism}");
                send(http.post(url).header("content-type", "application/x-ndjson").body(body)).await
            }
        }
    }

    pub async fn decisions(&self, pending_only: bool) -> Result<Vec<MappingDecision>> {
        match self {
            Backend::Embedded { engine, .. } => Ok(engine.list_decisions(pending_only)),
            Backend::Client { http, base } => send(http.get(format!("{base}/decisions?pending={pending_only}"))).await,
        }
    }

    pub async fn confirm(&self, id: &str, action: UserAction) -> Result<MappingDecision> {
        match self {
            Backend::Embedded { engine, .. } => engine.confirm_decision(id, action).await.map_err(engine_failure),
            Backend::Client { http, base } => send(http.post(format!("{base}/decisions/{id}")).json(&action)).await,
        }
    }

    pub async fn stats(&self) -> Result<StoreStats> {
        match self {
            Backend::Embedded { engine, .. } => Ok(engine.stats()),
            Backend::Client { http, base } => send(http.get(format!("{base}/stats"))).await,
        }
    }

    pub async fn tags(&self) -> Result<Vec<TagView>> {
        match self {
            Backend::Embedded { engine, .. } => Ok(engine
                .store()
                .tags()
                .into_iter()
                .map(|t| TagView {
                    id: t.id.to_string(),
                    name: t.name,
                    parent_id: t.parent_id.map(|p| p.to_string()),
                    level: t.level,
                })
                .collect()),
            Backend::Client { http, base } => send(http.get(format!("{base}/tags"))).await,
        }
    }

    pub async fn append(&self, card_id: &CardId, text: &str) -> Result<ProblemCard> {
        match self {
            Backend::Embedded { engine, .. } => engine.append_insight(card_id, text).map_err(engine_failure),
            Backend::Client { http, base } => {
                let req = TextRequest { text: text.to_owned() };
                send(http.post(format!("{base}/cards/{card_id}/insights")).json(&req)).await
            }
        }
    }

    pub async fn start_inquiry(&self, problem_text: &str, card_id: &CardId) -> Result<InquiryStart> {
        match self {
            Backend::Embedded { engine, .. } => {
                engine.start_inquiry(None, Some(problem_text), card_id).await.map_err(engine_failure)
            }
            Backend::Client { http, base } => {
                let req = InquiryRequest {
                    problem_id: None,
                    problem_text: Some(problem_text.to_owned()),
                    card_id: card_id.clone(),
                };
                send(http.post(format!("{base}/inquiry")).json(&req)).await
            }
        }
    }

    pub async fn inquiry_turn(&self, inquiry_id: &str, text: &str) -> Result<InquiryTurn> {
        match self {
            Backend::Embedded { engine, .. } => engine.inquiry_turn(inquiry_id, text).await.map_err(engine_failure),
            Backend::Client { http, base } => {
                let req = TextRequest { text: text.to_owned() };
                send(http.post(format!("{base}/inquiry/{inquiry_id}/turns")).json(&req)).await
            }
        }
    }
}

#[derive(serde::Deserialize)]
struct ApiErrorBody {
    error: String,
    message: String,
}

async fn send<T: DeserializeOwned>(req: reqwest::RequestBuilder) -> Result<T> {
    let resp = req.send().await.context("contacting server")?;
    let status = resp.status();
    let bytes = resp.bytes().await.context("reading server response")?;
    if !status.is_success() {
        let (code, message) = match serde_json::from_slice::<ApiErrorBody>(&bytes) {
            Ok(b) => (if b.error == "empty_note" { 2 } else { 1 }, format!("{} ({})", b.message, b.error)),
            Err(_) => (1, format!("server returned {status}: {}", String::from_utf8_lossy(&bytes))),
        };
        return Err(Failure::new(code, message).into());
    }
    serde_json::from_slice(&bytes).with_context(|| format!("decoding server response ({status})"))
}

/// Reads the session's SSE stream until a terminal event.
async fn stream_events(
    http: &reqwest::Client,
    base: &str,
    session_id: &str,
    on_event: &mut impl FnMut(&SessionEvent),
) -> Result<Vec<SessionEvent>> {
    let mut resp = http
        .get(format!("{base}/sessions/{session_id}/events"))
        .header("accept", "text/event-stream")
        .send()
        .await
        .context("opening event stream")?;
    if !resp.status().is_success() {
        anyhow::bail!("event stream returned {}", resp.status());
    }
    let mut buf = String::new();
    let mut events = Vec::new();
    while let Some(chunk) = resp.chunk().await.context("reading event stream")? {
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let data: Vec<&str> = block
                .lines()
                .filter_map(|l| l.strip_prefix("data:"))
                .map(|d| d.strip_prefix(' ').unwrap_or(d))
                .collect();
            if data.is_empty() {
                continue;
            }
            let ev: SessionEvent = serde_json::from_str(&data.join("\n")).context("decoding session event")?;
            on_event(&ev);
            let done = ev.kind.is_terminal();
            events.push(ev);
            if done {
                return Ok(events);
            }
        }
    }
    anyhow::bail!("event stream ended before the session finished")
}

pub fn print_json<T: Serialize + ?Sized>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}
