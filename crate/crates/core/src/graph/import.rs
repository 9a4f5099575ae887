//! Bulk JSONL import.
//!
//! Records are parsed and embedded in parallel per chunk, then committed in
//! input order through the store's write lock. Commit order never depends on
//! the thread count, so any parallelism produces the same graph.

use std::io::BufRead;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GraphStore, ProblemCard, StoreError, TagId, Timestamp};
use crate::embedding::{Embedder, EmbeddingVector};

const CHUNK: usize = 512;

/// One line of the import file. Tags are `/`-separated paths from a root,
/// e.g. `"Calculus/U-Substitution"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportRecord {
    pub problem: String,
    pub insight: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<Timestamp>,
}

pub struct ImportOptions<'a> {
    pub parallelism: usize,
    /// Embeds cards and newly created tags when present.
    pub embedder: Option<&'a dyn Embedder>,
    /// `created_at` for records that carry none.
    pub now: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImportProgress {
    pub processed: usize,
    pub imported: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportFailure {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportReport {
    pub imported: usize,
    pub failed: usize,
    #[serde(with = "millis")]
    pub elapsed: Duration,
    pub failures: Vec<ImportFailure>,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

struct Prepared {
    record: ImportRecord,
    tag_paths: Vec<Vec<(String, Option<EmbeddingVector>)>>,
    embedding: Option<EmbeddingVector>,
}

fn prepare(line: &str, embedder: Option<&dyn Embedder>) -> Result<Prepared, String> {
    let record: ImportRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if record.problem.trim().is_empty() {
        return Err("empty problem".into());
    }
    let mut tag_paths = Vec::with_capacity(record.tags.len());
    for path in &record.tags {
        let segments: Vec<&str> = path.split('/').map(str::trim).collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(format!("invalid tag path {path:?}"));
        }
        let mut resolved = Vec::with_capacity(segments.len());
        for s in segments {
            let e = embedder.map(|e| e.embed(s)).transpose().map_err(|e| e.to_string())?;
            resolved.push((s.to_owned(), e));
        }
        tag_paths.push(resolved);
    }
    let embedding = match embedder {
        Some(e) => {
            let text = format!("{}\n{}", record.problem, record.insight);
            Some(e.embed(&text).map_err(|e| e.to_string())?)
        }
        None => None,
    };
    Ok(Prepared { record, tag_paths, embedding })
}

impl GraphStore {
    /// Imports JSONL records. Per-record failures are collected in the report;
    /// only a read error on the stream aborts.
    pub fn bulk_import<R: BufRead>(
        &self,
        reader: R,
        options: &ImportOptions<'_>,
        progress: &(dyn Fn(ImportProgress) + Sync),
    ) -> Result<ImportReport, StoreError> {
        let start = Instant::now();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallelism.max(1))
            .build()
            .map_err(|e| StoreError::Io(std::io::Error::other(e)))?;
        let mut report = ImportReport { imported: 0, failed: 0, elapsed: Duration::ZERO, failures: Vec::new() };
        let mut lines = reader.lines().enumerate();
        let mut processed = 0;
        loop {
            let mut chunk: Vec<(usize, String)> = Vec::with_capacity(CHUNK);
            for (i, line) in lines.by_ref() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                chunk.push((i + 1, line));
                if chunk.len() == CHUNK {
                    break;
                }
            }
            if chunk.is_empty() {
                break;
            }
            let prepared: Vec<(usize, Result<Prepared, String>)> = pool.install(|| {
                chunk.par_iter().map(|(n, line)| (*n, prepare(line, options.embedder))).collect()
            });
            for (line, item) in prepared {
                match item.and_then(|p| self.commit(p, options.now).map_err(|e| e.to_string())) {
                    Ok(_) => report.imported += 1,
                    Err(reason) => {
                        report.failed += 1;
                        report.failures.push(ImportFailure { line, reason });
                    }
                }
            }
            processed += chunk.len();
            progress(ImportProgress { processed, imported: report.imported, failed: report.failed });
        }
        report.elapsed = start.elapsed();
        Ok(report)
    }

    fn commit(&self, p: Prepared, now: Timestamp) -> Result<ProblemCard, StoreError> {
        let mut inner = self.inner.write();
        let mut tag_ids: Vec<TagId> = Vec::with_capacity(p.tag_paths.len());
        for path in p.tag_paths {
            let mut parent: Option<TagId> = None;
            for (name, emb) in path {
                parent = Some(inner.upsert_tag(&name, parent.as_ref(), emb)?.id);
            }
            tag_ids.extend(parent);
        }
        let created = p.record.created_at.unwrap_or(now);
        let card = ProblemCard {
            id: self.fresh_card_id(&inner),
            problem_text: p.record.problem,
            insight_text: p.record.insight,
            embedding: p.embedding,
            created_at: created,
            last_accessed_at: created,
            access_count: 0,
            tag_ids: tag_ids.into_iter().collect(),
        };
        inner.insert_card(card.clone())?;
        Ok(card)
    }
}
