//! Embedded property-graph store for problem cards and the tag hierarchy.
//!
//! Readers run concurrently; writers are serialized behind one lock, and the
//! fulltext index is updated inside the same critical section as the write
//! that caused it.

mod fulltext;
mod import;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use parking_lot::{Mutex, RwLock};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::embedding::{dot, EmbeddingVector};
use crate::text::normalize_name;

pub use fulltext::{Bm25Params, InvertedIndex};
pub use import::{ImportFailure, ImportOptions, ImportProgress, ImportRecord, ImportReport};
pub use snapshot::{GraphSnapshot, SNAPSHOT_VERSION};

/// UTC seconds since the Unix epoch.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(CardId);
string_id!(TagId);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemCard {
    pub id: CardId,
    pub problem_text: String,
    pub insight_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    pub created_at: Timestamp,
    pub last_accessed_at: Timestamp,
    pub access_count: u64,
    #[serde(default)]
    pub tag_ids: BTreeSet<TagId>,
}

impl ProblemCard {
    /// The text indexed for fulltext and embedded for vector recall.
    pub fn searchable_text(&self) -> String {
        format!("{}\n{}", self.problem_text, self.insight_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub id: TagId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<TagId>,
    pub level: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("problem text must not be empty")]
    EmptyProblem,
    #[error("tag name must not be empty")]
    EmptyTagName,
    #[error("unknown tag {0}")]
    UnknownTag(TagId),
    #[error("unknown card {0}")]
    UnknownCard(CardId),
    #[error("unknown parent tag {0}")]
    UnknownParent(TagId),
    #[error("tag hierarchy cycle through {0}")]
    CycleDetected(TagId),
    #[error("embedding dimension {found} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub cards: usize,
    pub embedded_cards: usize,
    pub tags: usize,
    pub edges: usize,
}

const TAG_NAMESPACE: Uuid = Uuid::from_u128(0x6f1c_2a3e_8d4b_4c59_a1e7_52b0_93d8_c4f1);

/// Tag ids are derived from (parent, normalized name), so the same tag gets
/// the same id in every store.
fn tag_id_for(parent: Option<&TagId>, key: &str) -> TagId {
    let name = format!("{}/{}", parent.map(TagId::as_str).unwrap_or(""), key);
    TagId(Uuid::new_v5(&TAG_NAMESPACE, name.as_bytes()).to_string())
}

#[derive(Debug, Default)]
pub(crate) struct Inner {
    cards: BTreeMap<CardId, ProblemCard>,
    tags: BTreeMap<TagId, Tag>,
    children: HashMap<TagId, BTreeSet<TagId>>,
    roots: BTreeSet<TagId>,
    tag_cards: HashMap<TagId, BTreeSet<CardId>>,
    names: HashMap<(Option<TagId>, String), TagId>,
    fulltext: InvertedIndex,
    dim: Option<usize>,
}

impl Inner {
    fn check_dim(&mut self, v: &EmbeddingVector) -> Result<(), StoreError> {
        match self.dim {
            Some(d) if d != v.dim() => Err(StoreError::DimensionMismatch { expected: d, found: v.dim() }),
            Some(_) => Ok(()),
            None => {
                self.dim = Some(v.dim());
                Ok(())
            }
        }
    }

    fn insert_card(&mut self, card: ProblemCard) -> Result<(), StoreError> {
        for t in &card.tag_ids {
            if !self.tags.contains_key(t) {
                return Err(StoreError::UnknownTag(t.clone()));
            }
        }
        if let Some(e) = &card.embedding {
            self.check_dim(e)?;
        }
        for t in &card.tag_ids {
            self.tag_cards.entry(t.clone()).or_default().insert(card.id.clone());
        }
        self.fulltext.upsert(&card.id, &card.searchable_text());
        self.cards.insert(card.id.clone(), card);
        Ok(())
    }

    fn upsert_tag(
        &mut self,
        name: &str,
        parent_id: Option<&TagId>,
        embedding: Option<EmbeddingVector>,
    ) -> Result<Tag, StoreError> {
        let display = name.split_whitespace().collect::<Vec<_>>().join(" ");
        if display.is_empty() {
            return Err(StoreError::EmptyTagName);
        }
        let level = match parent_id {
            Some(p) => self.tags.get(p).ok_or_else(|| StoreError::UnknownParent(p.clone()))?.level + 1,
            None => 0,
        };
        let key = normalize_name(&display);
        let slot = (parent_id.cloned(), key.clone());
        if let Some(existing) = self.names.get(&slot) {
            let tag = self.tags.get_mut(existing).expect("name index points at a live tag");
            if tag.embedding.is_none() {
                if let Some(e) = embedding {
                    if self.dim.is_none_or(|d| d == e.dim()) {
                        self.dim.get_or_insert(e.dim());
                        tag.embedding = Some(e);
                    }
                }
            }
            return Ok(tag.clone());
        }
        if let Some(e) = &embedding {
            self.check_dim(e)?;
        }
        let mut id = tag_id_for(parent_id, &key);
        if self.tags.contains_key(&id) {
            // Only reachable when a loaded snapshot carries foreign ids.
            id = TagId(Uuid::new_v4().to_string());
        }
        let tag = Tag { id: id.clone(), name: display, parent_id: parent_id.cloned(), level, embedding };
        self.link_tag(tag.clone());
        self.names.insert(slot, id);
        Ok(tag)
    }

    fn link_tag(&mut self, tag: Tag) {
        match &tag.parent_id {
            Some(p) => {
                self.children.entry(p.clone()).or_default().insert(tag.id.clone());
            }
            None => {
                self.roots.insert(tag.id.clone());
            }
        }
        self.tags.insert(tag.id.clone(), tag);
    }

    fn card_mut(&mut self, id: &CardId) -> Result<&mut ProblemCard, StoreError> {
        self.cards.get_mut(id).ok_or_else(|| StoreError::UnknownCard(id.clone()))
    }

    fn expand(&self, entries: &[TagId]) -> Result<Vec<(TagId, u32)>, StoreError> {
        let mut depth: HashMap<&TagId, u32> = HashMap::new();
        let mut queue = VecDeque::new();
        for e in entries {
            let (key, _) = self.tags.get_key_value(e).ok_or_else(|| StoreError::UnknownTag(e.clone()))?;
            if depth.insert(key, 0).is_none() {
                queue.push_back(key);
            }
        }
        // Multi-source BFS gives the minimal depth from any entry.
        while let Some(t) = queue.pop_front() {
            let d = depth[t];
            if let Some(kids) = self.children.get(t) {
                for k in kids {
                    if !depth.contains_key(k) {
                        depth.insert(k, d + 1);
                        queue.push_back(k);
                    }
                }
            }
        }
        let mut out: Vec<(TagId, u32)> = depth.into_iter().map(|(t, d)| (t.clone(), d)).collect();
        out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }
}

/// In-process graph store.
pub struct GraphStore {
    inner: RwLock<Inner>,
    rng: Mutex<StdRng>,
    bm25: Bm25Params,
}

impl Default for GraphStore {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for GraphStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GraphStore").field("stats", &self.stats()).finish()
    }
}

impl GraphStore {
    pub fn new() -> Self {
        Self::from_rng(StdRng::from_os_rng())
    }

    /// A store whose card ids are reproducible for a given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::from_rng(StdRng::seed_from_u64(seed))
    }

    fn from_rng(rng: StdRng) -> Self {
        Self { inner: RwLock::new(Inner::default()), rng: Mutex::new(rng), bm25: Bm25Params::default() }
    }

    pub(crate) fn from_inner(inner: Inner) -> Self {
        let store = Self::new();
        *store.inner.write() = inner;
        store
    }

    fn fresh_card_id(&self, inner: &Inner) -> CardId {
        let mut rng = self.rng.lock();
        loop {
            let id = CardId(uuid::Builder::from_random_bytes(rng.random()).into_uuid().to_string());
            // Duplicate ids are retried, never surfaced.
            if !inner.cards.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn create_card(
        &self,
        problem_text: &str,
        insight_text: &str,
        tag_ids: &[TagId],
        now: Timestamp,
    ) -> Result<ProblemCard, StoreError> {
        if problem_text.trim().is_empty() {
            return Err(StoreError::EmptyProblem);
        }
        let mut inner = self.inner.write();
        let card = ProblemCard {
            id: self.fresh_card_id(&inner),
            problem_text: problem_text.to_owned(),
            insight_text: insight_text.to_owned(),
            embedding: None,
            created_at: now,
            last_accessed_at: now,
            access_count: 0,
            tag_ids: tag_ids.iter().cloned().collect(),
        };
        inner.insert_card(card.clone())?;
        Ok(card)
    }

    /// Counts one access. `last_accessed_at` never moves before `created_at`.
    pub fn record_access(&self, card_id: &CardId, now: Timestamp) -> Result<ProblemCard, StoreError> {
        let mut inner = self.inner.write();
        let card = inner.card_mut(card_id)?;
        card.access_count += 1;
        card.last_accessed_at = now.max(card.created_at);
        Ok(card.clone())
    }

    /// Returns the tag with the same normalized name under `parent_id`, or
    /// creates it.
    pub fn upsert_tag(&self, name: &str, parent_id: Option<&TagId>) -> Result<Tag, StoreError> {
        self.inner.write().upsert_tag(name, parent_id, None)
    }

    /// Like [`upsert_tag`](Self::upsert_tag), attaching `embedding` if the tag
    /// has none yet.
    pub fn upsert_tag_with_embedding(
        &self,
        name: &str,
        parent_id: Option<&TagId>,
        embedding: EmbeddingVector,
    ) -> Result<Tag, StoreError> {
        self.inner.write().upsert_tag(name, parent_id, Some(embedding))
    }

    pub fn set_tag_embedding(&self, tag_id: &TagId, embedding: EmbeddingVector) -> Result<(), StoreError> {
        let mut inner = self.inner.write();
        if !inner.tags.contains_key(tag_id) {
            return Err(StoreError::UnknownTag(tag_id.clone()));
        }
        inner.check_dim(&embedding)?;
        inner.tags.get_mut(tag_id).expect("checked").embedding = Some(embedding);
        Ok(())
    }

    /// Stores `embedding` only if the card's searchable text still equals
    /// `embedded_text`; a stale background job loses against a newer edit.
    /// Returns whether the embedding was applied.
    pub fn set_card_embedding(
        &self,
        card_id: &CardId,
        embedded_text: &str,
        embedding: EmbeddingVector,
    ) -> Result<bool, StoreError> {
        let mut inner = self.inner.write();
        let current = inner.cards.get(card_id).ok_or_else(|| StoreError::UnknownCard(card_id.clone()))?;
        if current.searchable_text() != embedded_text {
            return Ok(false);
        }
        inner.check_dim(&embedding)?;
        inner.card_mut(card_id)?.embedding = Some(embedding);
        Ok(true)
    }

    pub fn add_card_tag(&self, card_id: &CardId, tag_id: &TagId) -> Result<ProblemCard, StoreError> {
        let mut inner = self.inner.write();
        if !inner.tags.contains_key(tag_id) {
            return Err(StoreError::UnknownTag(tag_id.clone()));
        }
        let card = inner.card_mut(card_id)?;
        card.tag_ids.insert(tag_id.clone());
        let card = card.clone();
        inner.tag_cards.entry(tag_id.clone()).or_default().insert(card_id.clone());
        Ok(card)
    }

    /// Appends a section to the card's insight text and reindexes it.
    pub fn append_insight(&self, card_id: &CardId, section: &str) -> Result<ProblemCard, StoreError> {
        let mut inner = self.inner.write();
        let card = inner.card_mut(card_id)?;
        if card.insight_text.is_empty() {
            card.insight_text = section.to_owned();
        } else {
            card.insight_text = format!("{}\n\n{}", card.insight_text, section);
        }
        let card = card.clone();
        inner.fulltext.upsert(card_id, &card.searchable_text());
        Ok(card)
    }

    pub fn card(&self, id: &CardId) -> Option<ProblemCard> {
        self.inner.read().cards.get(id).cloned()
    }

    pub fn tag(&self, id: &TagId) -> Option<Tag> {
        self.inner.read().tags.get(id).cloned()
    }

    /// Cards resolved in input order; unknown ids are an error.
    pub fn cards_by_id(&self, ids: &[CardId]) -> Result<Vec<ProblemCard>, StoreError> {
        let inner = self.inner.read();
        ids.iter()
            .map(|id| inner.cards.get(id).cloned().ok_or_else(|| StoreError::UnknownCard(id.clone())))
            .collect()
    }

    pub fn tags(&self) -> Vec<Tag> {
        self.inner.read().tags.values().cloned().collect()
    }

    pub fn root_tags(&self) -> Vec<Tag> {
        let inner = self.inner.read();
        inner.roots.iter().map(|id| inner.tags[id].clone()).collect()
    }

    pub fn find_tag(&self, name: &str, parent_id: Option<&TagId>) -> Option<Tag> {
        let inner = self.inner.read();
        let id = inner.names.get(&(parent_id.cloned(), normalize_name(name)))?;
        inner.tags.get(id).cloned()
    }

    /// The level-0 ancestor of `tag_id`.
    pub fn root_of(&self, tag_id: &TagId) -> Option<TagId> {
        let inner = self.inner.read();
        let mut cur = inner.tags.get(tag_id)?;
        while let Some(p) = &cur.parent_id {
            cur = inner.tags.get(p)?;
        }
        Some(cur.id.clone())
    }

    /// Every descendant of the entry tags (entries included at depth 0) with
    /// its minimal depth from any entry, ordered by (depth, id).
    pub fn expand_tag_descendants(&self, entry_tag_ids: &[TagId]) -> Result<Vec<(TagId, u32)>, StoreError> {
        self.inner.read().expand(entry_tag_ids)
    }

    pub fn cards_with_tag(&self, tag_id: &TagId) -> Vec<CardId> {
        self.inner
            .read()
            .tag_cards
            .get(tag_id)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn fulltext_search(&self, query: &str, k: usize) -> Vec<(CardId, f64)> {
        self.inner.read().fulltext.search(query, k, self.bm25)
    }

    /// Exact cosine scan over embedded cards: top-`k` descending, ties by id.
    pub fn vector_search(&self, query: &EmbeddingVector, k: usize) -> Vec<(CardId, f64)> {
        let inner = self.inner.read();
        let mut hits: Vec<(CardId, f64)> = inner
            .cards
            .values()
            .filter_map(|c| {
                let e = c.embedding.as_ref()?;
                if e.dim() != query.dim() {
                    return None;
                }
                // Both sides are unit norm, so cosine is the plain dot product.
                let s = dot(query.as_slice(), e.as_slice());
                Some((c.id.clone(), s.clamp(-1.0, 1.0)))
            })
            .collect();
        if k < hits.len() {
            hits.select_nth_unstable_by(k, |a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            hits.truncate(k);
        }
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        hits
    }

    pub fn stats(&self) -> StoreStats {
        let inner = self.inner.read();
        StoreStats {
            cards: inner.cards.len(),
            embedded_cards: inner.cards.values().filter(|c| c.embedding.is_some()).count(),
            tags: inner.tags.len(),
            edges: inner.cards.values().map(|c| c.tag_ids.len()).sum(),
        }
    }

    /// Ids of cards still waiting for an embedding.
    pub fn unembedded_cards(&self) -> Vec<CardId> {
        self.inner.read().cards.values().filter(|c| c.embedding.is_none()).map(|c| c.id.clone()).collect()
    }
}
