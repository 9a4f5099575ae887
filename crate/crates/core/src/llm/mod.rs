//! Language-model gateway: note parsing, similarity assessment with level
//! filtering, and guided-inquiry dialogue.

mod provider;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::graph::{CardId, ProblemCard};
use crate::text::normalize_name;

pub use provider::{canonicalize, request_digest, HttpLlm, LlmProvider, ScriptedLlm};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("language model unavailable: {0}")]
    Unavailable(String),
    #[error("language model timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed language model response: {0}")]
    Malformed(String),
    #[error("note must not be empty")]
    EmptyNote,
    #[error("fixture error: {0}")]
    Fixture(String),
}

impl LlmError {
    /// Errors for which callers should fall back rather than give up.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, LlmError::Unavailable(_) | LlmError::Timeout(_) | LlmError::Malformed(_))
    }
}

pub const DEFAULT_TUTOR_DIRECTIVE: &str = "You are a Socratic mathematics tutor. Never give the answer. \
Ask one short question at a time that helps the learner connect their earlier insight to the current problem.";

pub const DEFAULT_SIMILARITY_RUBRIC: &str = "Rate how similar the new problem is to the past card: \
0 = essentially identical, 1 = slight variation, 2 = same core method with a different surface, \
3 = different method or topic.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedInsight {
    pub problem: String,
    pub insight: String,
    pub suggested_tags: Vec<String>,
    /// False when the provider failed and the note was kept verbatim; the
    /// problem statement then needs the user's attention.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(u8);

impl SimilarityScore {
    pub const MAX: u8 = 3;

    pub fn new(v: u8) -> Option<Self> {
        (v <= Self::MAX).then_some(Self(v))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityAssessment {
    pub score: SimilarityScore,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterLevel {
    Strict,
    Loose,
}

impl FilterLevel {
    pub fn threshold(self, t: &FilterThresholds) -> u8 {
        match self {
            FilterLevel::Strict => t.strict,
            FilterLevel::Loose => t.loose,
        }
    }
}

impl fmt::Display for FilterLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterLevel::Strict => "strict",
            FilterLevel::Loose => "loose",
        })
    }
}

impl FromStr for FilterLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strict" => Ok(FilterLevel::Strict),
            "loose" => Ok(FilterLevel::Loose),
            _ => Err(format!("unknown filter level {s:?} (expected strict or loose)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterThresholds {
    pub strict: u8,
    pub loose: u8,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self { strict: 2, loose: 3 }
    }
}

/// Keeps items whose score is at most `threshold`, and every unassessed item.
/// Order is preserved; an empty result is a legitimate "provide nothing".
pub fn filter_by_level<T>(
    assessed: Vec<(T, Option<SimilarityAssessment>)>,
    threshold: u8,
) -> Vec<(T, Option<SimilarityAssessment>)> {
    assessed
        .into_iter()
        .filter(|(_, a)| a.as_ref().is_none_or(|a| a.score.get() <= threshold))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Tutor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRefs {
    /// Card id or query-session id of the problem being worked on.
    pub current_problem_id: String,
    pub recalled_card_id: CardId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InquiryTurn {
    pub role: Role,
    pub text: String,
    pub context_refs: ContextRefs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InquirySession {
    pub id: String,
    pub refs: ContextRefs,
    pub problem_text: String,
    pub card_problem: String,
    pub card_insight: String,
    pub turns: Vec<InquiryTurn>,
}

impl InquirySession {
    pub fn new(id: String, current_problem_id: String, problem_text: String, card: &ProblemCard) -> Self {
        Self {
            id,
            refs: ContextRefs { current_problem_id, recalled_card_id: card.id.clone() },
            problem_text,
            card_problem: card.problem_text.clone(),
            card_insight: card.insight_text.clone(),
            turns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub timeout: Duration,
    pub tutor_directive: String,
    pub similarity_rubric: String,
    pub thresholds: FilterThresholds,
    /// How many reranked results get a similarity assessment.
    pub assess_top: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            tutor_directive: DEFAULT_TUTOR_DIRECTIVE.into(),
            similarity_rubric: DEFAULT_SIMILARITY_RUBRIC.into(),
            thresholds: FilterThresholds::default(),
            assess_top: 10,
        }
    }
}

#[derive(Clone)]
pub struct LlmGateway {
    provider: Arc<dyn LlmProvider>,
    config: GatewayConfig,
}

impl fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmGateway").field("config", &self.config).finish_non_exhaustive()
    }
}

#[derive(Deserialize)]
struct ParseResponse {
    problem: String,
    insight: String,
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Deserialize)]
struct SimilarityResponse {
    score: i64,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct InquiryResponse {
    reply: String,
}

fn dedup_tags(tags: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    tags.into_iter()
        .map(|t| t.trim().to_owned())
        .filter(|t| !t.is_empty() && seen.insert(normalize_name(t)))
        .collect()
}

impl LlmGateway {
    pub fn new(provider: Arc<dyn LlmProvider>, config: GatewayConfig) -> Self {
        Self { provider, config }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// One provider call bounded by the configured timeout.
    pub async fn complete(&self, request: Value) -> Result<Value, LlmError> {
        match tokio::time::timeout(self.config.timeout, self.provider.complete(&request)).await {
            Ok(r) => r,
            Err(_) => Err(LlmError::Timeout(self.config.timeout)),
        }
    }

    /// Structures a free-form note. Provider failures degrade to the note
    /// kept verbatim with `complete = false`.
    pub async fn parse_insight_note(&self, raw_note: &str) -> Result<ParsedInsight, LlmError> {
        let note = raw_note.trim();
        if note.is_empty() {
            return Err(LlmError::EmptyNote);
        }
        let parsed = self
            .complete(json!({ "task": "parse_note", "note": note }))
            .await
            .and_then(|v| serde_json::from_value::<ParseResponse>(v).map_err(|e| LlmError::Malformed(e.to_string())))
            .and_then(|r| {
                if r.problem.trim().is_empty() || r.insight.trim().is_empty() {
                    Err(LlmError::Malformed("problem and insight must be non-empty".into()))
                } else {
                    Ok(r)
                }
            });
        Ok(match parsed {
            Ok(r) => ParsedInsight {
                problem: r.problem.trim().to_owned(),
                insight: r.insight.trim().to_owned(),
                suggested_tags: dedup_tags(r.tags),
                complete: true,
            },
            Err(e) => {
                tracing::warn!(error = %e, "note parsing failed; keeping the note verbatim");
                let first_line = note.lines().find(|l| !l.trim().is_empty()).unwrap_or(note);
                ParsedInsight {
                    problem: first_line.trim().chars().take(200).collect(),
                    insight: note.to_owned(),
                    suggested_tags: Vec::new(),
                    complete: false,
                }
            }
        })
    }

    pub async fn assess_similarity(
        &self,
        new_problem_text: &str,
        card: &ProblemCard,
    ) -> Result<SimilarityAssessment, LlmError> {
        let request = json!({
            "task": "assess_similarity",
            "rubric": self.config.similarity_rubric,
            "new_problem": new_problem_text,
            "card_problem": card.problem_text,
            "card_insight": card.insight_text,
        });
        let r: SimilarityResponse =
            serde_json::from_value(self.complete(request).await?).map_err(|e| LlmError::Malformed(e.to_string()))?;
        let score = u8::try_from(r.score)
            .ok()
            .and_then(SimilarityScore::new)
            .ok_or_else(|| LlmError::Malformed(format!("similarity score {} outside 0..=3", r.score)))?;
        Ok(SimilarityAssessment { score, rationale: r.rationale })
    }

    /// Produces the next tutor turn. The opening turn needs no user message.
    /// On failure the session is left exactly as it was.
    pub async fn inquiry_turn(
        &self,
        session: &mut InquirySession,
        user_message: Option<&str>,
    ) -> Result<InquiryTurn, LlmError> {
        let history: Vec<Value> =
            session.turns.iter().map(|t| json!({ "role": t.role, "text": t.text })).collect();
        let request = json!({
            "task": "inquiry",
            "directive": self.config.tutor_directive,
            "problem": { "id": session.refs.current_problem_id, "text": session.problem_text },
            "insight": {
                "card_id": session.refs.recalled_card_id,
                "problem": session.card_problem,
                "insight": session.card_insight,
            },
            "history": history,
            "message": user_message,
        });
        let r: InquiryResponse =
            serde_json::from_value(self.complete(request).await?).map_err(|e| LlmError::Malformed(e.to_string()))?;
        if let Some(msg) = user_message {
            session.turns.push(InquiryTurn { role: Role::User, text: msg.to_owned(), context_refs: session.refs.clone() });
        }
        let turn = InquiryTurn { role: Role::Tutor, text: r.reply, context_refs: session.refs.clone() };
        session.turns.push(turn.clone());
        Ok(turn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphStore;

    fn gateway(stub: Arc<ScriptedLlm>) -> LlmGateway {
        LlmGateway::new(stub, GatewayConfig::default())
    }

    fn assessment(score: u8) -> Option<SimilarityAssessment> {
        Some(SimilarityAssessment { score: SimilarityScore::new(score).unwrap(), rationale: String::new() })
    }

    #[tokio::test]
    async fn parse_grammar_and_errors() {
        let gw = gateway(Arc::new(ScriptedLlm::new()));
        let p = gw.parse_insight_note("p ||| i").await.unwrap();
        assert_eq!((p.problem.as_str(), p.insight.as_str(), p.complete), ("p", "i", true));
        let p = gw.parse_insight_note("p ||| i ||| U-Sub, u-sub , chain rule").await.unwrap();
        assert_eq!(p.suggested_tags, vec!["U-Sub", "chain rule"]);
        assert_eq!(gw.parse_insight_note("   ").await, Err(LlmError::EmptyNote));
    }

    #[tokio::test]
    async fn parse_degrades_on_provider_failure() {
        let stub = Arc::new(ScriptedLlm::new());
        stub.set_down(true);
        let p = gateway(stub).parse_insight_note("first line\nsecond line").await.unwrap();
        assert!(!p.complete);
        assert_eq!(p.problem, "first line");
        assert_eq!(p.insight, "first line\nsecond line");
    }

    #[tokio::test]
    async fn parse_rejects_empty_fields_as_malformed() {
        let stub = Arc::new(ScriptedLlm::new().with_responder(|_| Some(json!({"problem": "", "insight": "x"}))));
        assert!(!gateway(stub).parse_insight_note("note").await.unwrap().complete);
    }

    #[tokio::test]
    async fn similarity_scores() {
        let store = GraphStore::new();
        let card = store.create_card("∫x(x²+1)³dx", "u-sub", &[], 0).unwrap();
        let stub = Arc::new(ScriptedLlm::new());
        let gw = gateway(stub.clone());
        assert_eq!(gw.assess_similarity("∫x(x²+1)³dx", &card).await.unwrap().score.get(), 0);
        assert!(matches!(gw.assess_similarity("other", &card).await, Err(LlmError::Unavailable(_))));
        stub.add_responder(|_| Some(json!({"score": 7})));
        assert!(matches!(gw.assess_similarity("other", &card).await, Err(LlmError::Malformed(_))));
    }

    #[tokio::test]
    async fn slow_provider_times_out() {
        let stub = Arc::new(ScriptedLlm::new());
        stub.set_delay(Some(Duration::from_millis(200)));
        let gw = LlmGateway::new(stub, GatewayConfig { timeout: Duration::from_millis(20), ..Default::default() });
        assert!(matches!(gw.complete(json!({"task": "x"})).await, Err(LlmError::Timeout(_))));
    }

    #[test]
    fn filter_levels() {
        let items = vec![("one", assessment(1)), ("three", assessment(3))];
        let strict = filter_by_level(items.clone(), FilterLevel::Strict.threshold(&FilterThresholds::default()));
        assert_eq!(strict.iter().map(|x| x.0).collect::<Vec<_>>(), vec!["one"]);
        let loose = filter_by_level(items, FilterLevel::Loose.threshold(&FilterThresholds::default()));
        assert_eq!(loose.len(), 2);
        let all3 = vec![("a", assessment(3)), ("b", assessment(3))];
        assert!(filter_by_level(all3, 2).is_empty());
        // unassessed items pass
        let mixed = vec![("a", assessment(3)), ("b", None), ("c", assessment(0))];
        assert_eq!(filter_by_level(mixed, 2).iter().map(|x| x.0).collect::<Vec<_>>(), vec!["b", "c"]);
    }

    #[tokio::test]
    async fn inquiry_history_and_outage() {
        let store = GraphStore::new();
        let card = store.create_card("∫x(x²+1)³dx", "one part is the derivative of another. so u-sub", &[], 0).unwrap();
        let stub = Arc::new(ScriptedLlm::new());
        let gw = gateway(stub.clone());
        let mut s = InquirySession::new("inq-1".into(), "query-1".into(), "∫x·sin(x²)dx".into(), &card);
        let open = gw.inquiry_turn(&mut s, None).await.unwrap();
        assert_eq!(open.role, Role::Tutor);
        assert_eq!(open.context_refs.recalled_card_id, card.id);
        assert!(open.text.contains("∫x(x²+1)³dx") && open.text.contains("∫x·sin(x²)dx"));

        gw.inquiry_turn(&mut s, Some("the derivative of x² is 2x")).await.unwrap();
        let last = stub.calls().pop().unwrap();
        assert_eq!(last["history"].as_array().unwrap().len(), 1);
        assert_eq!(last["history"][0]["role"], "tutor");
        assert_eq!(last["message"], "the derivative of x² is 2x");
        assert_eq!(last["directive"], DEFAULT_TUTOR_DIRECTIVE);
        assert_eq!(s.turns.len(), 3);

        stub.set_down(true);
        let before = s.clone();
        assert!(matches!(gw.inquiry_turn(&mut s, Some("hm")).await, Err(LlmError::Unavailable(_))));
        assert_eq!(s, before);
        stub.set_down(false);
        gw.inquiry_turn(&mut s, Some("hm")).await.unwrap();
        assert_eq!(s.turns.len(), 5);
    }
}
