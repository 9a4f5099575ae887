//! Three-channel hybrid recall and score fusion.
//!
//! Vector, fulltext and tag-hierarchy channels are queried independently.
//! Each channel's scores are normalized per query (z-score + logistic for the
//! vector channel, min-max for the others), then merged with [`MergeWeights`]
//! plus a bonus for every additional channel that found the same card.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, EmbeddingVector};
use crate::graph::{CardId, GraphStore, TagId};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Vector,
    Fulltext,
    Tag,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Vector, Channel::Fulltext, Channel::Tag];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Vector => "vector",
            Channel::Fulltext => "fulltext",
            Channel::Tag => "tag",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RecallError {
    #[error("merge weights must be non-negative and sum to 1 (got {0})")]
    InvalidWeights(f64),
    #[error("multi-match bonus must be non-negative")]
    NegativeBonus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeWeights {
    pub vector: f64,
    pub fulltext: f64,
    pub tag: f64,
    #[serde(default = "default_bonus")]
    pub multi_match_bonus: f64,
}

fn default_bonus() -> f64 {
    0.1
}

impl Default for MergeWeights {
    fn default() -> Self {
        Self { vector: 0.5, fulltext: 0.3, tag: 0.2, multi_match_bonus: 0.1 }
    }
}

impl MergeWeights {
    pub fn validate(&self) -> Result<(), RecallError> {
        let sum = self.vector + self.fulltext + self.tag;
        if [self.vector, self.fulltext, self.tag].iter().any(|w| *w < 0.0 || !w.is_finite())
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(RecallError::InvalidWeights(sum));
        }
        if self.multi_match_bonus < 0.0 || !self.multi_match_bonus.is_finite() {
            return Err(RecallError::NegativeBonus);
        }
        Ok(())
    }

    pub fn weight(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Vector => self.vector,
            Channel::Fulltext => self.fulltext,
            Channel::Tag => self.tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallConfig {
    /// Hits kept per channel.
    pub k: usize,
    pub merge_weights: MergeWeights,
    /// Overrides `merge_weights.multi_match_bonus` when set in config files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_match_bonus: Option<f64>,
    pub tag_entry_threshold: f64,
    pub tag_depth_decay: f64,
    pub max_entry_tags: usize,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            k: 50,
            merge_weights: MergeWeights::default(),
            multi_match_bonus: None,
            tag_entry_threshold: 0.6,
            tag_depth_decay: 0.8,
            max_entry_tags: 3,
        }
    }
}

impl RecallConfig {
    pub fn effective_weights(&self) -> MergeWeights {
        let mut w = self.merge_weights;
        if let Some(b) = self.multi_match_bonus {
            w.multi_match_bonus = b;
        }
        w
    }
}

pub type Hits = Vec<(CardId, f64)>;

/// Top-`k` cards by cosine to the query; cards without embeddings are skipped.
pub fn vector_recall(store: &GraphStore, query: &EmbeddingVector, k: usize) -> Hits {
    store.vector_search(query, k)
}

/// Top-`k` cards by BM25 (k1 = 1.2, b = 0.75) over problem + insight text.
pub fn fulltext_recall(store: &GraphStore, query: &str, k: usize) -> Hits {
    store.fulltext_search(query, k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryTag {
    pub tag_id: TagId,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TagRecall {
    pub entry_tags: Vec<EntryTag>,
    /// Number of tags reached by expansion, entries included.
    pub expanded: usize,
    pub hits: Hits,
}

/// Entry score of one tag: the larger of the fraction of its name tokens
/// present in the query and its cosine to the query. A tag qualifies when at
/// least one name token matches or the cosine clears `threshold`.
fn entry_score(
    name_tokens: &[String],
    query_tokens: &HashSet<String>,
    cos: Option<f64>,
    threshold: f64,
) -> Option<f64> {
    let overlap = if name_tokens.is_empty() {
        0.0
    } else {
        name_tokens.iter().filter(|t| query_tokens.contains(*t)).count() as f64 / name_tokens.len() as f64
    };
    let cos = cos.unwrap_or(0.0);
    (overlap > 0.0 || cos >= threshold).then_some(overlap.max(cos))
}

/// Tag-hierarchy expansion recall: pick entry tags, expand along
/// parent-to-child edges, score each card by the best
/// `entry_score * decay^depth` over its tags.
pub fn tag_recall(
    store: &GraphStore,
    query_text: &str,
    query_embedding: Option<&EmbeddingVector>,
    config: &RecallConfig,
) -> TagRecall {
    let query_tokens: HashSet<String> = tokenize(query_text).into_iter().collect();
    let mut entries: Vec<EntryTag> = store
        .tags()
        .into_iter()
        .filter_map(|t| {
            let cos = match (query_embedding, &t.embedding) {
                (Some(q), Some(e)) => cosine(q, e).ok(),
                _ => None,
            };
            let score = entry_score(&tokenize(&t.name), &query_tokens, cos, config.tag_entry_threshold)?;
            Some(EntryTag { tag_id: t.id, name: t.name, score })
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tag_id.cmp(&b.tag_id)));
    entries.truncate(config.max_entry_tags);
    if entries.is_empty() {
        return TagRecall::default();
    }

    let mut tag_scores: HashMap<TagId, f64> = HashMap::new();
    for entry in &entries {
        let expanded = store.expand_tag_descendants(std::slice::from_ref(&entry.tag_id)).unwrap_or_default();
        for (tag, depth) in expanded {
            let s = entry.score * config.tag_depth_decay.powi(depth as i32);
            let slot = tag_scores.entry(tag).or_insert(s);
            *slot = slot.max(s);
        }
    }
    let mut card_scores: BTreeMap<CardId, f64> = BTreeMap::new();
    for (tag, s) in &tag_scores {
        for card in store.cards_with_tag(tag) {
            let slot = card_scores.entry(card).or_insert(*s);
            *slot = slot.max(*s);
        }
    }
    let mut hits: Hits = card_scores.into_iter().collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    hits.truncate(config.k);
    TagRecall { entry_tags: entries, expanded: tag_scores.len(), hits }
}

/// Maps one channel's raw scores for one query into `[0, 1]`.
///
/// Vector scores are z-scored (sample standard deviation) and squashed with
/// the logistic function; fulltext and tag scores are min-max scaled. A
/// single candidate or a constant list maps to 0.5.
pub fn normalize_channel(channel: Channel, scores: &[(CardId, f64)]) -> Hits {
    let n = scores.len();
    let flat = |v: f64| scores.iter().map(|(id, _)| (id.clone(), v)).collect::<Hits>();
    if n <= 1 {
        return flat(0.5);
    }
    match channel {
        Channel::Vector => {
            let mean = scores.iter().map(|(_, s)| s).sum::<f64>() / n as f64;
            let var = scores.iter().map(|(_, s)| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            if sd == 0.0 || !sd.is_finite() {
                return flat(0.5);
            }
            scores.iter().map(|(id, s)| (id.clone(), 1.0 / (1.0 + (-(s - mean) / sd).exp()))).collect()
        }
        Channel::Fulltext | Channel::Tag => {
            let (lo, hi) = scores
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, s)| (lo.min(*s), hi.max(*s)));
            if hi == lo {
                return flat(0.5);
            }
            scores.iter().map(|(id, s)| (id.clone(), (s - lo) / (hi - lo))).collect()
        }
    }
}

/// One channel's result for one query, raw and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelHits {
    pub channel: Channel,
    pub raw: Hits,
    pub normalized: Hits,
}

impl ChannelHits {
    pub fn new(channel: Channel, raw: Hits) -> Self {
        let normalized = normalize_channel(channel, &raw);
        Self { channel, raw, normalized }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCandidate {
    pub card_id: CardId,
    pub raw_scores: BTreeMap<Channel, f64>,
    pub normalized_scores: BTreeMap<Channel, f64>,
    pub path_set: BTreeSet<Channel>,
    pub fused_relevance: f64,
}

/// Weighted merge of normalized channel scores plus the multi-match bonus,
/// clamped to `[0, 1]`. Sorted by fused relevance descending, ties by id.
///
/// Sums are always taken in the fixed vector, fulltext, tag order so the
/// output does not depend on the order channel results arrive in.
pub fn fuse(channels: &[ChannelHits], weights: &MergeWeights) -> Vec<RecallCandidate> {
    #[derive(Default)]
    struct Acc {
        raw: [Option<f64>; 3],
        norm: [Option<f64>; 3],
    }
    let mut acc: BTreeMap<&CardId, Acc> = BTreeMap::new();
    for ch in channels {
        let i = ch.channel.index();
        let raw: HashMap<&CardId, f64> = ch.raw.iter().map(|(id, s)| (id, *s)).collect();
        for (id, s) in &ch.normalized {
            let slot = acc.entry(id).or_default();
            // A channel reported twice keeps its best score.
            slot.norm[i] = Some(slot.norm[i].map_or(*s, |old| old.max(*s)));
            let r = raw.get(id).copied().unwrap_or(f64::NAN);
            slot.raw[i] = Some(slot.raw[i].map_or(r, |old| old.max(r)));
        }
    }
    let mut out: Vec<RecallCandidate> = acc
        .into_iter()
        .map(|(id, a)| {
            let mut sum = 0.0;
            let mut path_set = BTreeSet::new();
            let mut raw_scores = BTreeMap::new();
            let mut normalized_scores = BTreeMap::new();
            for ch in Channel::ALL {
                if let Some(s) = a.norm[ch.index()] {
                    sum += weights.weight(ch) * s;
                    path_set.insert(ch);
                    normalized_scores.insert(ch, s);
                    raw_scores.insert(ch, a.raw[ch.index()].unwrap_or(s));
                }
            }
            let bonus = weights.multi_match_bonus * (path_set.len() as f64 - 1.0);
            RecallCandidate {
                card_id: id.clone(),
                raw_scores,
                normalized_scores,
                path_set,
                fused_relevance: (sum + bonus).clamp(0.0, 1.0),
            }
        })
        .collect();
    out.sort_by(|a, b| b.fused_relevance.total_cmp(&a.fused_relevance).then_with(|| a.card_id.cmp(&b.card_id)));
    out
}

/// Result of running all three channels for one query.
#[derive(Debug, Clone, Default)]
pub struct RecallOutcome {
    pub channels: Vec<ChannelHits>,
    pub tags: TagRecall,
    pub candidates: Vec<RecallCandidate>,
}

/// Runs the three channels concurrently and fuses them. Without an embedding
/// the vector channel is skipped and tag entry falls back to name tokens.
pub fn recall_all(
    store: &GraphStore,
    query_text: &str,
    query_embedding: Option<&EmbeddingVector>,
    config: &RecallConfig,
) -> RecallOutcome {
    let ((vector, fulltext), tags) = rayon::join(
        || {
            rayon::join(
                || query_embedding.map(|q| vector_recall(store, q, config.k)),
                || fulltext_recall(store, query_text, config.k),
            )
        },
        || tag_recall(store, query_text, query_embedding, config),
    );
    let mut channels = Vec::with_capacity(3);
    if let Some(v) = vector {
        channels.push(ChannelHits::new(Channel::Vector, v));
    }
    channels.push(ChannelHits::new(Channel::Fulltext, fulltext));
    channels.push(ChannelHits::new(Channel::Tag, tags.hits.clone()));
    let candidates = fuse(&channels, &config.effective_weights());
    RecallOutcome { channels, tags, candidates }
}
