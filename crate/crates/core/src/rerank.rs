//! Mode-aware multi-signal reranking.
//!
//! `S = w_rel·R + w_acc·A + w_temp·T + w_div·D`, where R is fused relevance,
//! A scores access frequency, T scores recency and D rewards cards found by
//! several recall channels. The learning mode picks both the weight row and
//! the shape of A and T.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{CardId, GraphStore, StoreError, Timestamp, SECONDS_PER_DAY};
use crate::recall::{Channel, RecallCandidate};

/// Access-count scale.
pub const K_ACC: f64 = 10.0;
/// Recency half-life in days.
pub const T_HALF_DAYS: f64 = 30.0;
/// Number of recall channels.
pub const N_PATHS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearningMode {
    Learning,
    Review,
    Balanced,
}

impl LearningMode {
    pub const ALL: [LearningMode; 3] = [LearningMode::Learning, LearningMode::Review, LearningMode::Balanced];

    pub fn weights(self) -> RerankWeights {
        match self {
            LearningMode::Learning => RerankWeights { rel: 0.50, acc: 0.20, temp: 0.20, div: 0.10 },
            LearningMode::Review => RerankWeights { rel: 0.40, acc: 0.25, temp: 0.25, div: 0.10 },
            LearningMode::Balanced => RerankWeights { rel: 0.60, acc: 0.15, temp: 0.15, div: 0.10 },
        }
    }
}

impl fmt::Display for LearningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearningMode::Learning => "learning",
            LearningMode::Review => "review",
            LearningMode::Balanced => "balanced",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown learning mode {0:?} (expected learning, review or balanced)")]
pub struct UnknownMode(pub String);

impl FromStr for LearningMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "learning" => Ok(LearningMode::Learning),
            "review" => Ok(LearningMode::Review),
            "balanced" => Ok(LearningMode::Balanced),
            _ => Err(UnknownMode(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankWeights {
    pub rel: f64,
    pub acc: f64,
    pub temp: f64,
    pub div: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalParams {
    pub k_acc: f64,
    pub t_half_days: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        Self { k_acc: K_ACC, t_half_days: T_HALF_DAYS }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RerankError {
    #[error("path count {0} outside 1..={N_PATHS}")]
    PathCountOutOfRange(usize),
    #[error("unknown card {0}")]
    UnknownCard(CardId),
}

/// Logarithmic growth (Learning, Balanced), clamped at 1 past `k_acc`;
/// reciprocal decay (Review).
pub fn access_score(n_access: u64, mode: LearningMode, params: &SignalParams) -> f64 {
    let n = n_access as f64;
    match mode {
        LearningMode::Learning | LearningMode::Balanced => ((1.0 + n).ln() / (1.0 + params.k_acc).ln()).min(1.0),
        LearningMode::Review => 1.0 / (1.0 + n / params.k_acc),
    }
}

/// Hyperbolic decay (Learning, Balanced); its complement, an S-shaped
/// growth (Review).
pub fn temporal_score(delta_days: f64, mode: LearningMode, params: &SignalParams) -> f64 {
    let x = delta_days.max(0.0) / params.t_half_days;
    match mode {
        LearningMode::Learning | LearningMode::Balanced => 1.0 / (1.0 + x),
        LearningMode::Review => x / (1.0 + x),
    }
}

pub fn diversity_score(path_count: usize) -> Result<f64, RerankError> {
    if !(1..=N_PATHS).contains(&path_count) {
        return Err(RerankError::PathCountOutOfRange(path_count));
    }
    Ok((path_count - 1) as f64 / (N_PATHS - 1) as f64)
}

/// Days since last access (creation for never-opened cards).
pub fn days_since(last_accessed_at: Timestamp, now: Timestamp) -> f64 {
    ((now - last_accessed_at) as f64 / SECONDS_PER_DAY).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub card_id: CardId,
    #[serde(rename = "R")]
    pub relevance: f64,
    #[serde(rename = "A")]
    pub access: f64,
    #[serde(rename = "T")]
    pub temporal: f64,
    #[serde(rename = "D")]
    pub diversity: f64,
    #[serde(rename = "S_final")]
    pub score: f64,
    pub mode: LearningMode,
    pub paths: Vec<Channel>,
}

impl RankedResult {
    /// Recomputes S from the components with the mode's weights.
    pub fn recompute(&self) -> f64 {
        let w = self.mode.weights();
        w.rel * self.relevance + w.acc * self.access + w.temp * self.temporal + w.div * self.diversity
    }
}

/// Per-card inputs the reranker needs besides the candidate itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardSignals {
    pub access_count: u64,
    pub last_accessed_at: Timestamp,
}

pub fn score_candidate(
    candidate: &RecallCandidate,
    signals: CardSignals,
    mode: LearningMode,
    now: Timestamp,
    params: &SignalParams,
) -> Result<RankedResult, RerankError> {
    let w = mode.weights();
    let r = candidate.fused_relevance;
    let a = access_score(signals.access_count, mode, params);
    let t = temporal_score(days_since(signals.last_accessed_at, now), mode, params);
    let d = diversity_score(candidate.path_set.len())?;
    Ok(RankedResult {
        card_id: candidate.card_id.clone(),
        relevance: r,
        access: a,
        temporal: t,
        diversity: d,
        score: w.rel * r + w.acc * a + w.temp * t + w.div * d,
        mode,
        paths: candidate.path_set.iter().copied().collect(),
    })
}

/// Sorts by score descending, ties by card id ascending.
pub fn sort_ranked(results: &mut [RankedResult]) {
    results.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.card_id.cmp(&b.card_id)));
}

/// Scores every candidate against card metadata from `lookup`.
pub fn rerank_with<F>(
    candidates: &[RecallCandidate],
    mode: LearningMode,
    now: Timestamp,
    params: &SignalParams,
    mut lookup: F,
) -> Result<Vec<RankedResult>, RerankError>
where
    F: FnMut(&CardId) -> Option<CardSignals>,
{
    let mut out = candidates
        .iter()
        .map(|c| {
            let signals = lookup(&c.card_id).ok_or_else(|| RerankError::UnknownCard(c.card_id.clone()))?;
            score_candidate(c, signals, mode, now, params)
        })
        .collect::<Result<Vec<_>, _>>()?;
    sort_ranked(&mut out);
    Ok(out)
}

/// Reranks against the live store.
pub fn rerank(
    store: &GraphStore,
    candidates: &[RecallCandidate],
    mode: LearningMode,
    now: Timestamp,
    params: &SignalParams,
) -> Result<Vec<RankedResult>, RerankError> {
    let ids: Vec<CardId> = candidates.iter().map(|c| c.card_id.clone()).collect();
    let cards = store.cards_by_id(&ids).map_err(|e| match e {
        StoreError::UnknownCard(id) => RerankError::UnknownCard(id),
        other => unreachable!("cards_by_id only reports unknown cards: {other}"),
    })?;
    let mut it = cards.into_iter();
    rerank_with(candidates, mode, now, params, |_| {
        it.next().map(|c| CardSignals { access_count: c.access_count, last_accessed_at: c.last_accessed_at })
    })
}
