//! Maps free-form suggested tags onto the existing hierarchy.
//!
//! Candidates are prescreened by embedding similarity, then a batched
//! branch-selection call and a per-suggestion precise-selection call decide
//! where each tag belongs. When the model is unavailable or answers nonsense
//! a deterministic level-aware fallback decides instead. Nothing touches the
//! graph until the user confirms a decision.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embedding::{Embedder, EmbedError, EmbeddingVector};
use crate::graph::{CardId, GraphStore, StoreError, Tag, TagId, Timestamp};
use crate::llm::{LlmError, LlmGateway};
use crate::text::normalize_name;

pub const W_NAME: f64 = 0.7;
pub const W_CONTEXT: f64 = 0.3;
pub const W_CONF: f64 = 0.7;
pub const W_LEVEL: f64 = 0.3;
pub const DEFAULT_TOP_N: usize = 5;
pub const UNCATEGORIZED: &str = "Uncategorized";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSuggestion {
    pub raw_name: String,
    pub source_card_id: CardId,
    pub problem_context: String,
}

/// A suggestion with its name and context embeddings computed up front, so
/// the mapping itself never blocks on an embedding provider.
#[derive(Debug, Clone)]
pub struct PreparedSuggestion {
    pub suggestion: TagSuggestion,
    pub name_embedding: Option<EmbeddingVector>,
    pub context_embedding: Option<EmbeddingVector>,
}

impl PreparedSuggestion {
    pub fn prepare(suggestion: TagSuggestion, embedder: &dyn Embedder) -> Result<Self, EmbedError> {
        let name_embedding = Some(embedder.embed(&suggestion.raw_name)?);
        let context_embedding = match suggestion.problem_context.trim() {
            "" => None,
            ctx => Some(embedder.embed(ctx)?),
        };
        Ok(Self { suggestion, name_embedding, context_embedding })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub tag_id: TagId,
    pub score_cand: f64,
    pub name_sim: f64,
    pub context_sim: f64,
    pub level: u32,
}

pub fn level_weight(level: u32) -> f64 {
    1.0 / (1.0 + level as f64)
}

pub fn fallback_score(c: &CandidateScore) -> f64 {
    W_CONF * c.score_cand + W_LEVEL * level_weight(c.level)
}

fn sim(a: Option<&EmbeddingVector>, b: &EmbeddingVector) -> f64 {
    a.and_then(|a| crate::embedding::cosine(a, b).ok()).unwrap_or(0.0)
}

/// Top-`top_n` library tags by `0.7·cos(name, tag) + 0.3·cos(context, tag)`,
/// ties by tag id. Tags without an embedding are not candidates.
pub fn prescreen(prepared: &PreparedSuggestion, library: &[Tag], top_n: usize) -> Vec<CandidateScore> {
    let mut out: Vec<CandidateScore> = library
        .iter()
        .filter_map(|t| {
            let e = t.embedding.as_ref()?;
            let name_sim = sim(prepared.name_embedding.as_ref(), e);
            let context_sim = sim(prepared.context_embedding.as_ref(), e);
            Some(CandidateScore {
                tag_id: t.id.clone(),
                score_cand: W_NAME * name_sim + W_CONTEXT * context_sim,
                name_sim,
                context_sim,
                level: t.level,
            })
        })
        .collect();
    out.sort_by(|a, b| b.score_cand.total_cmp(&a.score_cand).then_with(|| a.tag_id.cmp(&b.tag_id)));
    out.truncate(top_n);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParentRef {
    Existing(TagId),
    /// A root tag created by name on confirmation.
    NewRoot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Outcome {
    MapTo { tag_id: TagId },
    CreateUnder { parent: ParentRef, name: String },
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Llm,
    Fallback,
}

/// Argmax of `0.7·Conf + 0.3·W_level`, ties by tag id; `Rejected` when there
/// is nothing to choose from.
pub fn fallback_select(candidates: &[CandidateScore]) -> Outcome {
    candidates
        .iter()
        .max_by(|a, b| fallback_score(a).total_cmp(&fallback_score(b)).then_with(|| b.tag_id.cmp(&a.tag_id)))
        .map_or(Outcome::Rejected, |c| Outcome::MapTo { tag_id: c.tag_id.clone() })
}

#[derive(Deserialize)]
struct BranchResponse {
    items: Vec<BranchItem>,
}

#[derive(Deserialize)]
struct BranchItem {
    tag: String,
    #[serde(default)]
    branch_ids: Vec<TagId>,
}

/// One request for the whole batch. Entry `i` holds the chosen branches of
/// suggestion `i`, or `None` if it could not be placed. Unknown branch ids in
/// the response are ignored.
pub async fn phase1_branch_select(
    gateway: &LlmGateway,
    batch: &[TagSuggestion],
    branches: &[Tag],
) -> Result<Vec<Option<Vec<TagId>>>, LlmError> {
    if branches.is_empty() || batch.is_empty() {
        return Ok(vec![None; batch.len()]);
    }
    let request = json!({
        "task": "branch_select",
        "items": batch.iter().map(|s| json!({ "tag": s.raw_name, "context": s.problem_context })).collect::<Vec<_>>(),
        "branches": branches.iter().map(|b| json!({ "id": b.id, "name": b.name })).collect::<Vec<_>>(),
    });
    let resp: BranchResponse =
        serde_json::from_value(gateway.complete(request).await?).map_err(|e| LlmError::Malformed(e.to_string()))?;
    let known: HashSet<&TagId> = branches.iter().map(|b| &b.id).collect();
    let mut by_name: HashMap<String, Vec<TagId>> = HashMap::new();
    for item in resp.items {
        let ids = by_name.entry(normalize_name(&item.tag)).or_default();
        for id in item.branch_ids {
            if known.contains(&id) && !ids.contains(&id) {
                ids.push(id);
            }
        }
    }
    Ok(batch
        .iter()
        .map(|s| by_name.get(&normalize_name(&s.raw_name)).filter(|ids| !ids.is_empty()).cloned())
        .collect())
}

#[derive(Deserialize)]
struct PreciseResponse {
    action: String,
    #[serde(default)]
    target_id: Option<TagId>,
    #[serde(default)]
    parent_id: Option<TagId>,
    #[serde(default)]
    name: Option<String>,
}

/// One request per suggestion. `branch_tags` is the branch's whole subtree
/// (the branch included); the answer must stay inside it.
pub async fn phase2_precise_select(
    gateway: &LlmGateway,
    suggestion: &TagSuggestion,
    branch: &Tag,
    candidates: &[Tag],
    branch_tags: &[Tag],
) -> Result<Outcome, LlmError> {
    let request = json!({
        "task": "precise_select",
        "tag": suggestion.raw_name,
        "context": suggestion.problem_context,
        "branch": branch.name,
        "candidates": candidates
            .iter()
            .map(|t| json!({ "id": t.id, "name": t.name, "level": t.level }))
            .collect::<Vec<_>>(),
    });
    let r: PreciseResponse =
        serde_json::from_value(gateway.complete(request).await?).map_err(|e| LlmError::Malformed(e.to_string()))?;
    let in_branch = |id: &TagId| branch_tags.iter().any(|t| &t.id == id);
    match r.action.as_str() {
        "map" => {
            let target = r.target_id.ok_or_else(|| LlmError::Malformed("map without target_id".into()))?;
            if !in_branch(&target) {
                return Err(LlmError::Malformed(format!("target {target} is not in branch {}", branch.name)));
            }
            Ok(Outcome::MapTo { tag_id: target })
        }
        "create" => {
            let parent = r.parent_id.ok_or_else(|| LlmError::Malformed("create without parent_id".into()))?;
            let name = r.name.map(|n| n.trim().to_owned()).filter(|n| !n.is_empty());
            let name = name.ok_or_else(|| LlmError::Malformed("create without name".into()))?;
            if !in_branch(&parent) {
                return Err(LlmError::Malformed(format!("parent {parent} is not in branch {}", branch.name)));
            }
            // Creating a tag that already exists under that parent is a mapping.
            let key = normalize_name(&name);
            if let Some(existing) =
                branch_tags.iter().find(|t| t.parent_id.as_ref() == Some(&parent) && normalize_name(&t.name) == key)
            {
                return Ok(Outcome::MapTo { tag_id: existing.id.clone() });
            }
            Ok(Outcome::CreateUnder { parent: ParentRef::Existing(parent), name })
        }
        other => Err(LlmError::Malformed(format!("unknown action {other:?}"))),
    }
}

/// A proposed outcome before it has been queued.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub suggestion: TagSuggestion,
    pub outcome: Outcome,
    pub origin: Origin,
    pub candidates: Vec<CandidateScore>,
}

fn subtree(store: &GraphStore, root: &TagId) -> Vec<Tag> {
    let ids = store.expand_tag_descendants(std::slice::from_ref(root)).unwrap_or_default();
    ids.iter().filter_map(|(id, _)| store.tag(id)).collect()
}

fn uncategorized(store: &GraphStore, name: &str) -> Outcome {
    let parent = match store.find_tag(UNCATEGORIZED, None) {
        Some(t) => ParentRef::Existing(t.id),
        None => ParentRef::NewRoot(UNCATEGORIZED.to_owned()),
    };
    Outcome::CreateUnder { parent, name: name.trim().to_owned() }
}

/// Runs the full mapping pipeline over a batch. Reads the store only.
pub async fn propose(
    store: &GraphStore,
    gateway: &LlmGateway,
    batch: &[PreparedSuggestion],
    top_n: usize,
) -> Vec<Proposal> {
    if batch.is_empty() {
        return Vec::new();
    }
    let library = store.tags();
    let candidates: Vec<Vec<CandidateScore>> = batch.iter().map(|p| prescreen(p, &library, top_n)).collect();
    let suggestions: Vec<TagSuggestion> = batch.iter().map(|p| p.suggestion.clone()).collect();
    let branches = store.root_tags();

    let fallback = |i: usize| Proposal {
        suggestion: suggestions[i].clone(),
        outcome: fallback_select(&candidates[i]),
        origin: Origin::Fallback,
        candidates: candidates[i].clone(),
    };

    let chosen = match phase1_branch_select(gateway, &suggestions, &branches).await {
        Ok(c) => c,
        Err(e) => {
            tracing::warn!(error = %e, "branch selection failed; using fallback for the batch");
            return (0..batch.len()).map(fallback).collect();
        }
    };

    let mut out = Vec::with_capacity(batch.len());
    for (i, branch_ids) in chosen.into_iter().enumerate() {
        let Some(branch) = branch_ids.and_then(|ids| ids.into_iter().next()).and_then(|id| store.tag(&id)) else {
            out.push(Proposal {
                suggestion: suggestions[i].clone(),
                outcome: uncategorized(store, &suggestions[i].raw_name),
                origin: Origin::Fallback,
                candidates: candidates[i].clone(),
            });
            continue;
        };
        let branch_tags = subtree(store, &branch.id);
        let mut context: Vec<Tag> = vec![branch.clone()];
        for c in &candidates[i] {
            if c.tag_id != branch.id {
                if let Some(t) = branch_tags.iter().find(|t| t.id == c.tag_id) {
                    context.push(t.clone());
                }
            }
        }
        match phase2_precise_select(gateway, &suggestions[i], &branch, &context, &branch_tags).await {
            Ok(outcome) => out.push(Proposal {
                suggestion: suggestions[i].clone(),
                outcome,
                origin: Origin::Llm,
                candidates: candidates[i].clone(),
            }),
            Err(e) => {
                tracing::warn!(error = %e, tag = %suggestions[i].raw_name, "precise selection failed; using fallback");
                out.push(fallback(i));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionStatus {
    Pending,
    Accepted,
    Modified,
    Vetoed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingDecision {
    pub id: String,
    pub suggestion: TagSuggestion,
    pub outcome: Outcome,
    pub origin: Origin,
    pub confirmed: bool,
    pub status: DecisionStatus,
    pub candidates: Vec<CandidateScore>,
    /// Tag the card was linked to on confirmation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub applied_tag_id: Option<TagId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum UserAction {
    Accept,
    Modify { outcome: Outcome },
    Veto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub decision_id: String,
    pub from: DecisionStatus,
    pub to: DecisionStatus,
    pub outcome: Outcome,
    pub at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum DecisionError {
    #[error("unknown decision {0}")]
    UnknownDecision(String),
    #[error("decision {0} is already confirmed")]
    AlreadyConfirmed(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Pending and confirmed decisions plus their transition log. Serializable so
/// an embedded client can persist it between runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionQueue {
    next_id: u64,
    decisions: BTreeMap<String, MappingDecision>,
    log: Vec<Transition>,
}

impl DecisionQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, proposal: Proposal) -> MappingDecision {
        self.next_id += 1;
        let decision = MappingDecision {
            id: format!("dec-{:06}", self.next_id),
            suggestion: proposal.suggestion,
            outcome: proposal.outcome,
            origin: proposal.origin,
            confirmed: false,
            status: DecisionStatus::Pending,
            candidates: proposal.candidates,
            applied_tag_id: None,
        };
        self.decisions.insert(decision.id.clone(), decision.clone());
        decision
    }

    pub fn get(&self, id: &str) -> Option<&MappingDecision> {
        self.decisions.get(id)
    }

    /// Decisions ordered by id, optionally only unconfirmed ones.
    pub fn list(&self, pending_only: bool) -> Vec<MappingDecision> {
        self.decisions.values().filter(|d| !pending_only || !d.confirmed).cloned().collect()
    }

    pub fn log(&self) -> &[Transition] {
        &self.log
    }

    /// Applies the user's verdict. Accepted and modified outcomes are written
    /// to the graph; a failed write leaves the decision pending.
    pub fn confirm(
        &mut self,
        store: &GraphStore,
        embedder: Option<&dyn Embedder>,
        id: &str,
        action: UserAction,
        now: Timestamp,
    ) -> Result<MappingDecision, DecisionError> {
        let d = self.decisions.get(id).ok_or_else(|| DecisionError::UnknownDecision(id.to_owned()))?;
        if d.confirmed {
            return Err(DecisionError::AlreadyConfirmed(id.to_owned()));
        }
        let (status, outcome) = match action {
            UserAction::Accept => (DecisionStatus::Accepted, d.outcome.clone()),
            UserAction::Modify { outcome } => (DecisionStatus::Modified, outcome),
            UserAction::Veto => (DecisionStatus::Vetoed, d.outcome.clone()),
        };
        let applied = if status == DecisionStatus::Vetoed {
            None
        } else {
            apply(store, embedder, &d.suggestion.source_card_id, &outcome)?
        };
        let d = self.decisions.get_mut(id).expect("looked up above");
        self.log.push(Transition {
            decision_id: id.to_owned(),
            from: d.status,
            to: status,
            outcome: outcome.clone(),
            at: now,
        });
        d.status = status;
        d.outcome = outcome;
        d.confirmed = true;
        d.applied_tag_id = applied;
        Ok(d.clone())
    }
}

fn upsert(store: &GraphStore, embedder: Option<&dyn Embedder>, name: &str, parent: Option<&TagId>) -> Result<Tag, DecisionError> {
    if let Some(t) = store.find_tag(name, parent) {
        return Ok(t);
    }
    Ok(match embedder {
        Some(e) => store.upsert_tag_with_embedding(name, parent, e.embed(name)?)?,
        None => store.upsert_tag(name, parent)?,
    })
}

fn apply(
    store: &GraphStore,
    embedder: Option<&dyn Embedder>,
    card: &CardId,
    outcome: &Outcome,
) -> Result<Option<TagId>, DecisionError> {
    if store.card(card).is_none() {
        return Err(StoreError::UnknownCard(card.clone()).into());
    }
    let tag_id = match outcome {
        Outcome::Rejected => return Ok(None),
        Outcome::MapTo { tag_id } => tag_id.clone(),
        Outcome::CreateUnder { parent, name } => {
            let parent_id = match parent {
                ParentRef::Existing(id) => {
                    if store.tag(id).is_none() {
                        return Err(StoreError::UnknownParent(id.clone()).into());
                    }
                    id.clone()
                }
                ParentRef::NewRoot(root) => upsert(store, embedder, root, None)?.id,
            };
            upsert(store, embedder, name, Some(&parent_id))?.id
        }
    };
    store.add_card_tag(card, &tag_id)?;
    Ok(Some(tag_id))
}
