//! Language-model providers.
//!
//! Every request and response is a JSON object whose `task` field names the
//! operation. [`ScriptedLlm`] answers from fixtures keyed by the SHA-256 of the
//! canonical request, then from registered responders, then from a few
//! deterministic built-in rules.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::LlmError;
use crate::text::normalize_name;

#[async_trait]
pub trait LlmProvider: Send + Sync {
    async fn complete(&self, request: &Value) -> Result<Value, LlmError>;
}

/// Object keys sorted recursively, so equal requests serialize identically.
pub fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `request`.
pub fn request_digest(request: &Value) -> String {
    let bytes = serde_json::to_vec(&canonicalize(request)).expect("json values always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

type Responder = Arc<dyn Fn(&Value) -> Option<Value> + Send + Sync>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureEntry {
    #[serde(default)]
    request: Option<Value>,
    #[serde(default)]
    digest: Option<String>,
    response: Value,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FixtureFile {
    Many(Vec<FixtureEntry>),
    One(FixtureEntry),
}

/// Deterministic stub provider for tests and offline runs.
#[derive(Default)]
pub struct ScriptedLlm {
    fixtures: Mutex<HashMap<String, Value>>,
    responders: Mutex<Vec<Responder>>,
    down: AtomicBool,
    delay: Mutex<Option<Duration>>,
    calls: Mutex<Vec<Value>>,
}

impl ScriptedLlm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `*.json` file in `dir` (sorted by name). A file holds one
    /// `{"request"|"digest", "response"}` entry or an array of them.
    pub fn from_dir(dir: &Path) -> Result<Self, LlmError> {
        let stub = Self::new();
        stub.load_dir(dir)?;
        Ok(stub)
    }

    pub fn load_dir(&self, dir: &Path) -> Result<usize, LlmError> {
        let bad = |p: &Path, e: String| LlmError::Fixture(format!("{}: {e}", p.display()));
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| bad(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut loaded = 0;
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| bad(&p, e.to_string()))?;
            let file: FixtureFile = serde_json::from_str(&text).map_err(|e| bad(&p, e.to_string()))?;
            let entries = match file {
                FixtureFile::Many(v) => v,
                FixtureFile::One(e) => vec![e],
            };
            for e in entries {
                let digest = match (e.request, e.digest) {
                    (Some(r), _) => request_digest(&r),
                    (None, Some(d)) => d,
                    (None, None) => return Err(bad(&p, "entry needs a request or a digest".into())),
                };
                self.fixtures.lock().insert(digest, e.response);
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn with_fixture(self, request: Value, response: Value) -> Self {
        self.add_fixture(request, response);
        self
    }

    pub fn add_fixture(&self, request: Value, response: Value) {
        self.fixtures.lock().insert(request_digest(&request), response);
    }

    /// Responders run in registration order after fixtures miss.
    pub fn with_responder(self, f: impl Fn(&Value) -> Option<Value> + Send + Sync + 'static) -> Self {
        self.add_responder(f);
        self
    }

    pub fn add_responder(&self, f: impl Fn(&Value) -> Option<Value> + Send + Sync + 'static) {
        self.responders.lock().push(Arc::new(f));
    }

    /// Simulates a provider outage.
    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    pub fn set_delay(&self, delay: Option<Duration>) {
        *self.delay.lock() = delay;
    }

    /// Every request received, in order, including failed ones.
    pub fn calls(&self) -> Vec<Value> {
        self.calls.lock().clone()
    }

    pub fn call_count(&self, task: &str) -> usize {
        self.calls.lock().iter().filter(|c| c["task"] == task).count()
    }

    fn lookup(&self, request: &Value) -> Option<Value> {
        if let Some(v) = self.fixtures.lock().get(&request_digest(request)) {
            return Some(v.clone());
        }
        let responders = self.responders.lock().clone();
        responders.iter().find_map(|f| f(request)).or_else(|| builtin_rule(request))
    }
}

#[async_trait]
impl LlmProvider for ScriptedLlm {
    async fn complete(&self, request: &Value) -> Result<Value, LlmError> {
        self.calls.lock().push(request.clone());
        let delay = *self.delay.lock();
        if let Some(d) = delay {
            tokio::time::sleep(d).await;
        }
        if self.down.load(Ordering::SeqCst) {
            return Err(LlmError::Unavailable("scripted provider is down".into()));
        }
        self.lookup(request).ok_or_else(|| {
            LlmError::Unavailable(format!("no scripted response for request {}", request_digest(request)))
        })
    }
}

fn first_sentence(text: &str) -> &str {
    let t = text.trim();
    match t.find(['.', '\n']) {
        Some(i) => t[..i].trim(),
        None => t,
    }
}

/// Rules used when no fixture matches:
/// - `parse_note`: the `problem ||| insight ||| tag, tag` grammar;
/// - `assess_similarity`: identical problems score 0;
/// - `inquiry`: a templated Socratic question citing both contexts.
fn builtin_rule(request: &Value) -> Option<Value> {
    match request["task"].as_str()? {
        "parse_note" => {
            let note = request["note"].as_str()?;
            if !note.contains("|||") {
                return None;
            }
            let parts: Vec<&str> = note.split("|||").map(str::trim).collect();
            let tags: Vec<&str> = parts
                .get(2)
                .map(|t| t.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
                .unwrap_or_default();
            Some(json!({ "problem": parts[0], "insight": parts.get(1).copied().unwrap_or(""), "tags": tags }))
        }
        "assess_similarity" => {
            let a = normalize_name(request["new_problem"].as_str()?);
            let b = normalize_name(request["card_problem"].as_str()?);
            (a == b).then(|| json!({ "score": 0, "rationale": "the problems are essentially identical" }))
        }
        "inquiry" => {
            let problem = request["problem"]["text"].as_str()?;
            let past = request["insight"]["problem"].as_str()?;
            let insight = first_sentence(request["insight"]["insight"].as_str()?);
            let reply = match request["message"].as_str() {
                None => format!(
                    "Earlier you worked on \"{past}\" and noted: \"{insight}\". \
                     Looking at \"{problem}\", can you find parts with a similar relationship?"
                ),
                Some(msg) => format!(
                    "You said: \"{msg}\". How does that connect to what you noticed in \"{past}\"? \
                     What would you try next on \"{problem}\"?"
                ),
            };
            Some(json!({ "reply": reply }))
        }
        _ => None,
    }
}

/// HTTP provider: posts the request (plus `model`) to `endpoint` and expects
/// the JSON response body.
pub struct HttpLlm {
    endpoint: String,
    model: String,
    client: reqwest::Client,
}

impl HttpLlm {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), model: model.into(), client: reqwest::Client::new() }
    }
}

#[async_trait]
impl LlmProvider for HttpLlm {
    async fn complete(&self, request: &Value) -> Result<Value, LlmError> {
        let mut body = request.clone();
        if let Value::Object(m) = &mut body {
            m.insert("model".into(), Value::String(self.model.clone()));
        }
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        resp.json().await.map_err(|e| LlmError::Malformed(e.to_string()))
    }
}
