use std::collections::{BTreeMap, BTreeSet, HashMap};

use irec_core::graph::CardId;
use irec_core::llm::{filter_by_level, request_digest, FilterLevel, FilterThresholds, SimilarityAssessment, SimilarityScore};
use irec_core::recall::{Channel, RecallCandidate};
use irec_core::rerank::{access_score, rerank_with, temporal_score, CardSignals, LearningMode, SignalParams};
use irec_core::tagmap::{fallback_score, fallback_select, level_weight, CandidateScore, Outcome};
use proptest::prelude::*;
use serde_json::{json, Value};

const NOW: i64 = 1_800_000_000;

fn arb_mode() -> impl Strategy<Value = LearningMode> {
    prop_oneof![Just(LearningMode::Learning), Just(LearningMode::Review), Just(LearningMode::Balanced)]
}

/// (fused relevance, path mask, access count, age in seconds) per card.
fn arb_cards() -> impl Strategy<Value = Vec<(f64, u8, u64, i64)>> {
    proptest::collection::vec((0.0f64..=1.0, 1u8..8, 0u64..60, 0i64..400 * 86_400), 1..60)
}

fn build(cards: &[(f64, u8, u64, i64)], id: impl Fn(usize) -> CardId) -> (Vec<RecallCandidate>, HashMap<CardId, CardSignals>) {
    let mut candidates = Vec::new();
    let mut signals = HashMap::new();
    for (i, &(r, mask, n, age)) in cards.iter().enumerate() {
        let path_set: BTreeSet<Channel> =
            Channel::ALL.into_iter().enumerate().filter(|(b, _)| mask & (1 << b) != 0).map(|(_, c)| c).collect();
        let card_id = id(i);
        signals.insert(card_id.clone(), CardSignals { access_count: n, last_accessed_at: NOW - age });
        candidates.push(RecallCandidate {
            card_id,
            raw_scores: BTreeMap::new(),
            normalized_scores: BTreeMap::new(),
            path_set,
            fused_relevance: r,
        });
    }
    (candidates, signals)
}

fn assessment(score: u8) -> SimilarityAssessment {
    SimilarityAssessment { score: SimilarityScore::new(score).unwrap(), rationale: String::new() }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2_000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn temporal_monotone_in_age(a in 0.0f64..10_000.0, gap in 1e-3f64..1_000.0) {
        let p = SignalParams::default();
        let b = a + gap;
        prop_assert!(temporal_score(b, LearningMode::Review, &p) > temporal_score(a, LearningMode::Review, &p));
        prop_assert!(temporal_score(b, LearningMode::Learning, &p) < temporal_score(a, LearningMode::Learning, &p));
        let sum = temporal_score(a, LearningMode::Learning, &p) + temporal_score(a, LearningMode::Review, &p);
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn access_monotone_in_count(n in 0u64..100_000) {
        let p = SignalParams::default();
        prop_assert!(access_score(n + 1, LearningMode::Review, &p) < access_score(n, LearningMode::Review, &p));
        prop_assert!(access_score(n + 1, LearningMode::Learning, &p) >= access_score(n, LearningMode::Learning, &p));
        for mode in LearningMode::ALL {
            prop_assert!((0.0..=1.0).contains(&access_score(n, mode, &p)));
        }
    }

    #[test]
    fn every_result_decomposes(cards in arb_cards(), mode in arb_mode()) {
        let (candidates, signals) = build(&cards, |i| CardId::from(format!("c{i:03}")));
        let ranked = rerank_with(&candidates, mode, NOW, &SignalParams::default(), |id| signals.get(id).copied()).unwrap();
        prop_assert_eq!(ranked.len(), candidates.len());
        for r in &ranked {
            prop_assert!((r.recompute() - r.score).abs() <= 1e-12);
            for c in [r.relevance, r.access, r.temporal, r.diversity, r.score] {
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
        for pair in ranked.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn order_preserving_relabeling_keeps_rank_order(cards in arb_cards(), mode in arb_mode(), offset in 0usize..5_000) {
        let (a, sa) = build(&cards, |i| CardId::from(format!("c{i:03}")));
        let (b, sb) = build(&cards, |i| CardId::from(format!("relabeled-{:05}", i + offset)));
        let p = SignalParams::default();
        let ra = rerank_with(&a, mode, NOW, &p, |id| sa.get(id).copied()).unwrap();
        let rb = rerank_with(&b, mode, NOW, &p, |id| sb.get(id).copied()).unwrap();
        let index = |id: &CardId, prefix: &str, off: usize| -> usize {
            id.as_str().strip_prefix(prefix).unwrap().parse::<usize>().unwrap() - off
        };
        let oa: Vec<usize> = ra.iter().map(|r| index(&r.card_id, "c", 0)).collect();
        let ob: Vec<usize> = rb.iter().map(|r| index(&r.card_id, "relabeled-", offset)).collect();
        prop_assert_eq!(oa, ob);
    }

    #[test]
    fn higher_relevance_wins_when_all_else_equal(r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0, n in 0u64..30, age in 0i64..10_000_000, mode in arb_mode()) {
        prop_assume!((r1 - r2).abs() > 1e-9);
        let (c, s) = build(&[(r1, 3, n, age), (r2, 3, n, age)], |i| CardId::from(format!("c{i}")));
        let ranked = rerank_with(&c, mode, NOW, &SignalParams::default(), |id| s.get(id).copied()).unwrap();
        let winner = if r1 > r2 { "c0" } else { "c1" };
        prop_assert_eq!(ranked[0].card_id.as_str(), winner);
    }

    #[test]
    fn fallback_matches_naive_scoring(cands in proptest::collection::vec((0.0f64..=1.0, 0u32..8), 1..12)) {
        let cs: Vec<CandidateScore> = cands
            .iter()
            .enumerate()
            .map(|(i, &(conf, level))| CandidateScore {
                tag_id: format!("t{i:02}").into(),
                score_cand: conf,
                name_sim: conf,
                context_sim: conf,
                level,
            })
            .collect();
        let mut best = (f64::NEG_INFINITY, String::new());
        for c in &cs {
            let naive = 0.7 * c.score_cand + 0.3 / (1.0 + f64::from(c.level));
            prop_assert!((fallback_score(c) - naive).abs() <= 1e-12);
            if naive > best.0 {
                best = (naive, c.tag_id.to_string());
            }
        }
        prop_assert_eq!(fallback_select(&cs), Outcome::MapTo { tag_id: best.1.into() });
    }

    #[test]
    fn level_weight_is_non_increasing(level in 0u32..1_000_000) {
        prop_assert!(level_weight(level + 1) <= level_weight(level));
    }

    #[test]
    fn loose_keeps_a_superset_in_order(scores in proptest::collection::vec(proptest::option::of(0u8..=3), 0..30)) {
        let items: Vec<(usize, Option<SimilarityAssessment>)> =
            scores.iter().enumerate().map(|(i, s)| (i, s.map(assessment))).collect();
        let t = FilterThresholds::default();
        let strict: Vec<usize> = filter_by_level(items.clone(), FilterLevel::Strict.threshold(&t)).into_iter().map(|(i, _)| i).collect();
        let loose: Vec<usize> = filter_by_level(items, FilterLevel::Loose.threshold(&t)).into_iter().map(|(i, _)| i).collect();
        prop_assert!(strict.iter().all(|i| loose.contains(i)));
        prop_assert!(strict.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(loose.windows(2).all(|w| w[0] < w[1]));
        for (i, s) in scores.iter().enumerate() {
            let kept = strict.contains(&i);
            prop_assert_eq!(kept, s.is_none_or(|s| s <= 2));
        }
    }

    #[test]
    fn digest_ignores_key_order(a in "[a-z]{0,12}", b in any::<i32>(), c in proptest::collection::vec(any::<u8>(), 0..5)) {
        let one = json!({"task": "t", "a": a, "nested": {"b": b, "c": c}});
        let mut m = serde_json::Map::new();
        m.insert("nested".into(), json!({"c": c, "b": b}));
        m.insert("a".into(), json!(a));
        m.insert("task".into(), json!("t"));
        prop_assert_eq!(request_digest(&one), request_digest(&Value::Object(m)));
    }
}
