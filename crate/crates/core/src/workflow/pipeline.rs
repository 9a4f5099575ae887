//! The query pipeline: recall, fuse, rerank, assess, filter.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};

use super::session::*;
use super::Shared;
use crate::embedding::EmbeddingVector;
use crate::graph::ProblemCard;
use crate::llm::filter_by_level;
use crate::recall::{fulltext_recall, fuse, tag_recall, vector_recall, Channel, ChannelHits, TagRecall};
use crate::rerank::rerank;

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("payloads serialize")
}

/// Runs `f` on the blocking pool, giving up on it after `limit`.
async fn blocking<T: Send + 'static>(limit: Duration, f: impl FnOnce() -> T + Send + 'static) -> Result<T, String> {
    match tokio::time::timeout(limit, tokio::task::spawn_blocking(f)).await {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(format!("task failed: {e}")),
        Err(_) => Err(format!("timed out after {} ms", limit.as_millis())),
    }
}

fn fail(shared: &Shared, h: &SessionHandle, stage: &str, message: String, partial: Value) {
    tracing::error!(session = %h.id(), stage, %message, "query session failed");
    h.log(ERROR_STEP, 0.0, format!("{stage}: {message}"));
    let payload = ErrorPayload { stage: stage.to_owned(), message, partial_results: partial };
    h.emit(EventKind::Error, to_value(&payload), shared.clock.now());
}

pub(crate) async fn run(shared: Arc<Shared>, h: Arc<SessionHandle>) {
    let meta = h.meta.lock().clone();
    let timeouts = shared.settings.timeouts;
    let k = shared.settings.recall.k;
    let store = Arc::clone(&shared.store);

    // Embedding runs while fulltext recall produces the preliminary results.
    let embed_task = {
        let embedder = Arc::clone(&shared.embedder);
        let q = meta.query_text.clone();
        tokio::spawn(async move {
            let start = Instant::now();
            let r = blocking(timeouts.embed(), move || embedder.embed(&q)).await;
            (r, ms(start))
        })
    };

    let start = Instant::now();
    let fulltext = {
        let store = Arc::clone(&store);
        let q = meta.query_text.clone();
        blocking(timeouts.recall(), move || fulltext_recall(&store, &q, k)).await
    };
    let fulltext = match fulltext {
        Ok(hits) => {
            h.log("recall.fulltext", ms(start), format!("{} hits", hits.len()));
            hits
        }
        Err(reason) => {
            tracing::warn!(session = %meta.session_id, %reason, "fulltext channel degraded");
            h.log("recall.fulltext", ms(start), format!("skipped: {reason}"));
            Vec::new()
        }
    };
    let preliminary = PreliminaryPayload {
        results: fulltext
            .iter()
            .filter_map(|(id, score)| {
                let card = store.card(id)?;
                Some(PreliminaryHit { card_id: id.clone(), score: *score, problem_text: card.problem_text })
            })
            .collect(),
    };
    let preliminary = to_value(&preliminary);
    h.emit(EventKind::PreliminaryResults, preliminary.clone(), shared.clock.now());

    let query_embedding: Option<EmbeddingVector> = match embed_task.await {
        Ok((Ok(Ok(v)), dur)) => {
            h.log("embed", dur, format!("dim {}", v.dim()));
            Some(v)
        }
        Ok((Ok(Err(e)), dur)) => {
            h.log("embed", dur, format!("failed: {e}"));
            return fail(&shared, &h, "embed", e.to_string(), preliminary);
        }
        Ok((Err(reason), dur)) => {
            tracing::warn!(session = %meta.session_id, %reason, "embedding degraded; vector channel skipped");
            h.log("embed", dur, format!("skipped: {reason}"));
            None
        }
        Err(e) => {
            h.log("embed", 0.0, format!("failed: {e}"));
            return fail(&shared, &h, "embed", e.to_string(), preliminary);
        }
    };

    let vector_fut = {
        let store = Arc::clone(&store);
        let q = query_embedding.clone();
        async move {
            let start = Instant::now();
            match q {
                None => (None, 0.0, "skipped: no query embedding".to_owned()),
                Some(q) => match blocking(timeouts.recall(), move || vector_recall(&store, &q, k)).await {
                    Ok(hits) => {
                        let d = format!("{} hits", hits.len());
                        (Some(hits), ms(start), d)
                    }
                    Err(reason) => (None, ms(start), format!("skipped: {reason}")),
                },
            }
        }
    };
    let tag_fut = {
        let store = Arc::clone(&store);
        let q = meta.query_text.clone();
        let e = query_embedding.clone();
        let cfg = shared.settings.recall.clone();
        async move {
            let start = Instant::now();
            let r = blocking(timeouts.recall(), move || tag_recall(&store, &q, e.as_ref(), &cfg)).await;
            (r, ms(start))
        }
    };
    let ((vector, vdur, vdetail), (tags, tdur)) = tokio::join!(vector_fut, tag_fut);
    h.log("recall.vector", vdur, vdetail);
    let tags = match tags {
        Ok(t) => {
            h.log(
                "recall.tag",
                tdur,
                format!("{} entry tags, {} expanded, {} hits", t.entry_tags.len(), t.expanded, t.hits.len()),
            );
            t
        }
        Err(reason) => {
            h.log("recall.tag", tdur, format!("skipped: {reason}"));
            TagRecall::default()
        }
    };
    let resolved = TagsResolvedPayload { entry_tags: tags.entry_tags.clone(), expanded: tags.expanded, hits: tags.hits.len() };
    h.emit(EventKind::TagsResolved, to_value(&resolved), shared.clock.now());

    let start = Instant::now();
    let mut channels = Vec::with_capacity(3);
    if let Some(v) = vector {
        channels.push(ChannelHits::new(Channel::Vector, v));
    }
    channels.push(ChannelHits::new(Channel::Fulltext, fulltext));
    channels.push(ChannelHits::new(Channel::Tag, tags.hits));
    let candidates = fuse(&channels, &shared.settings.recall.effective_weights());
    h.log("fuse", ms(start), format!("{} candidates from {} channels", candidates.len(), channels.len()));

    let start = Instant::now();
    let ranked = match rerank(&store, &candidates, meta.mode, meta.started_at, &shared.settings.rerank) {
        Ok(r) => r,
        Err(e) => {
            h.log("rerank", ms(start), format!("failed: {e}"));
            return fail(&shared, &h, "rerank", e.to_string(), preliminary);
        }
    };
    let ids: Vec<_> = ranked.iter().map(|r| r.card_id.clone()).collect();
    let cards: Vec<ProblemCard> = match store.cards_by_id(&ids) {
        Ok(c) => c,
        Err(e) => return fail(&shared, &h, "rerank", e.to_string(), preliminary),
    };
    let views: Vec<ResultView> = ranked
        .into_iter()
        .zip(&cards)
        .map(|(ranked, c)| ResultView {
            ranked,
            problem_text: c.problem_text.clone(),
            insight_text: c.insight_text.clone(),
        })
        .collect();
    h.log("rerank", ms(start), format!("{} results, mode {}", views.len(), meta.mode));
    let reranked = to_value(&RerankedPayload { results: views.clone() });
    h.emit(EventKind::RerankedResults, reranked, shared.clock.now());

    // Only the head of the ranking is assessed and eligible for presentation.
    let start = Instant::now();
    let window = shared.gateway.config().assess_top.min(views.len());
    let assessments = futures::future::join_all(
        cards[..window].iter().map(|card| shared.gateway.assess_similarity(&meta.query_text, card)),
    )
    .await;
    let mut unassessed = 0;
    let assessed: Vec<(ResultView, Option<_>)> = views
        .into_iter()
        .take(window)
        .zip(assessments)
        .map(|(v, a)| match a {
            Ok(a) => (v, Some(a)),
            Err(e) => {
                unassessed += 1;
                tracing::warn!(session = %meta.session_id, card = %v.ranked.card_id, error = %e,
                    "similarity assessment failed; card passes unfiltered");
                (v, None)
            }
        })
        .collect();
    h.log("assess", ms(start), format!("{} assessed, {} unassessed", window - unassessed, unassessed));
    let status = |a: &Option<_>| if a.is_some() { AssessmentStatus::Assessed } else { AssessmentStatus::Unassessed };
    let payload = AssessmentsPayload {
        assessments: assessed
            .iter()
            .map(|(v, a)| AssessmentView { card_id: v.ranked.card_id.clone(), status: status(a), assessment: a.clone() })
            .collect(),
    };
    h.emit(EventKind::AssessmentsReady, to_value(&payload), shared.clock.now());

    let start = Instant::now();
    let threshold = meta.filter_level.threshold(&shared.gateway.config().thresholds);
    let before = assessed.len();
    let kept = filter_by_level(assessed, threshold);
    h.log("filter", ms(start), format!("kept {} of {} at {} (threshold {threshold})", kept.len(), before, meta.filter_level));
    let results: Vec<PresentedResult> = kept
        .into_iter()
        .enumerate()
        .map(|(i, (view, a))| PresentedResult { rank: i + 1, view, status: status(&a), assessment: a })
        .collect();
    *h.final_cards.lock() = Some(results.iter().map(|r| r.view.ranked.card_id.clone()).collect());
    let payload = FinalPayload {
        mode: meta.mode,
        filter_level: meta.filter_level,
        provide_nothing: results.is_empty(),
        results,
    };
    h.emit(EventKind::FinalResults, to_value(&payload), shared.clock.now());
}

/// Payload for a session whose pipeline died without reporting.
pub(crate) fn abandoned(shared: &Shared, h: &SessionHandle, reason: String) {
    if !h.is_finished() {
        fail(shared, h, "pipeline", reason, json!(null));
    }
}
