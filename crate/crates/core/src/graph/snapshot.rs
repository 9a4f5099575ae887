//! JSON snapshot persistence: `{version, cards, tags, edges}`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CardId, GraphStore, Inner, ProblemCard, StoreError, Tag, TagId, Timestamp};
use crate::embedding::EmbeddingVector;
use crate::text::normalize_name;

pub const SNAPSHOT_VERSION: u32 = 1;

/// Card as persisted; tag membership lives in `edges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotCard {
    pub id: CardId,
    pub problem_text: String,
    pub insight_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    pub created_at: Timestamp,
    pub last_accessed_at: Timestamp,
    pub access_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub version: u32,
    pub cards: Vec<SnapshotCard>,
    pub tags: Vec<Tag>,
    pub edges: Vec<(CardId, TagId)>,
}

impl GraphStore {
    /// Canonical snapshot: cards, tags and edges sorted by id.
    pub fn snapshot(&self) -> GraphSnapshot {
        let inner = self.inner.read();
        let mut edges = Vec::new();
        let cards = inner
            .cards
            .values()
            .map(|c| {
                edges.extend(c.tag_ids.iter().map(|t| (c.id.clone(), t.clone())));
                SnapshotCard {
                    id: c.id.clone(),
                    problem_text: c.problem_text.clone(),
                    insight_text: c.insight_text.clone(),
                    embedding: c.embedding.clone(),
                    created_at: c.created_at,
                    last_accessed_at: c.last_accessed_at,
                    access_count: c.access_count,
                }
            })
            .collect();
        GraphSnapshot { version: SNAPSHOT_VERSION, cards, tags: inner.tags.values().cloned().collect(), edges }
    }

    /// Rebuilds a store, including every index, from a snapshot.
    pub fn from_snapshot(snapshot: GraphSnapshot) -> Result<GraphStore, StoreError> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(StoreError::VersionMismatch { expected: SNAPSHOT_VERSION, found: snapshot.version });
        }
        let corrupt = |msg: String| StoreError::CorruptSnapshot(msg);
        let mut inner = Inner::default();

        let mut by_id: HashMap<TagId, Tag> = HashMap::new();
        for tag in snapshot.tags {
            if tag.name.trim().is_empty() {
                return Err(corrupt(format!("tag {} has an empty name", tag.id)));
            }
            if let Some(prev) = by_id.insert(tag.id.clone(), tag) {
                return Err(corrupt(format!("duplicate tag id {}", prev.id)));
            }
        }
        // Parents before children; anything left over sits on a cycle or
        // points at a missing parent.
        let mut pending: Vec<TagId> = by_id.keys().cloned().collect();
        pending.sort();
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for id in pending {
                let tag = &by_id[&id];
                let expected_level = match &tag.parent_id {
                    None => Some(0),
                    Some(p) => inner.tags.get(p).map(|pt| pt.level + 1),
                };
                let Some(level) = expected_level else {
                    rest.push(id);
                    continue;
                };
                if tag.level != level {
                    return Err(corrupt(format!("tag {id} has level {} but should be {level}", tag.level)));
                }
                if let Some(e) = &tag.embedding {
                    inner.check_dim(e).map_err(|e| corrupt(e.to_string()))?;
                }
                let slot = (tag.parent_id.clone(), normalize_name(&tag.name));
                if inner.names.insert(slot, id.clone()).is_some() {
                    return Err(corrupt(format!("duplicate tag name {:?} under one parent", tag.name)));
                }
                inner.link_tag(tag.clone());
            }
            if rest.len() == before {
                let stuck = &by_id[&rest[0]];
                return Err(match &stuck.parent_id {
                    Some(p) if by_id.contains_key(p) => StoreError::CycleDetected(stuck.id.clone()),
                    Some(p) => corrupt(format!("tag {} has unknown parent {p}", stuck.id)),
                    None => unreachable!("roots always resolve"),
                });
            }
            pending = rest;
        }

        let mut tag_sets: HashMap<CardId, BTreeSet<TagId>> = HashMap::new();
        for (card, tag) in snapshot.edges {
            if !inner.tags.contains_key(&tag) {
                return Err(corrupt(format!("edge to unknown tag {tag}")));
            }
            tag_sets.entry(card).or_default().insert(tag);
        }
        for c in snapshot.cards {
            if inner.cards.contains_key(&c.id) {
                return Err(corrupt(format!("duplicate card id {}", c.id)));
            }
            if c.last_accessed_at < c.created_at {
                return Err(corrupt(format!("card {} accessed before it was created", c.id)));
            }
            let card = ProblemCard {
                tag_ids: tag_sets.remove(&c.id).unwrap_or_default(),
                id: c.id,
                problem_text: c.problem_text,
                insight_text: c.insight_text,
                embedding: c.embedding,
                created_at: c.created_at,
                last_accessed_at: c.last_accessed_at,
                access_count: c.access_count,
            };
            inner.insert_card(card).map_err(|e| corrupt(e.to_string()))?;
        }
        if let Some(card) = tag_sets.keys().next() {
            return Err(corrupt(format!("edge from unknown card {card}")));
        }
        Ok(GraphStore::from_inner(inner))
    }

    /// Writes the snapshot atomically (temp file + rename).
    pub fn save_snapshot(&self, path: &Path) -> Result<(), StoreError> {
        let json = serde_json::to_vec(&self.snapshot()).map_err(|e| StoreError::Io(e.into()))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&json)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<GraphStore, StoreError> {
        let bytes = fs::read(path)?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
        // Check the version before the schema so old files report a mismatch.
        if let Some(v) = value.get("version").and_then(|v| v.as_u64()) {
            if v != u64::from(SNAPSHOT_VERSION) {
                return Err(StoreError::VersionMismatch { expected: SNAPSHOT_VERSION, found: v as u32 });
            }
        }
        let snapshot: GraphSnapshot =
            serde_json::from_value(value).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
        GraphStore::from_snapshot(snapshot)
    }
}
