//! Incremental inverted index with Okapi BM25 scoring.

use std::collections::{HashMap, HashSet};

use crate::graph::CardId;
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Default, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, HashMap<CardId, u32>>,
    doc_terms: HashMap<CardId, Vec<String>>,
    doc_len: HashMap<CardId, u32>,
    total_len: u64,
}

impl InvertedIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_len.len()
    }

    /// Indexes `text` under `id`, replacing any previous content.
    pub fn upsert(&mut self, id: &CardId, text: &str) {
        self.remove(id);
        let tokens = tokenize(text);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        let len = tokens.len() as u32;
        let mut terms = Vec::with_capacity(tf.len());
        for (term, count) in tf {
            self.postings.entry(term.clone()).or_default().insert(id.clone(), count);
            terms.push(term);
        }
        self.doc_terms.insert(id.clone(), terms);
        self.doc_len.insert(id.clone(), len);
        self.total_len += u64::from(len);
    }

    pub fn remove(&mut self, id: &CardId) {
        let Some(terms) = self.doc_terms.remove(id) else {
            return;
        };
        for term in terms {
            if let Some(list) = self.postings.get_mut(&term) {
                list.remove(id);
                if list.is_empty() {
                    self.postings.remove(&term);
                }
            }
        }
        if let Some(len) = self.doc_len.remove(id) {
            self.total_len -= u64::from(len);
        }
    }

    /// Top-`k` documents by BM25, descending, ties by id ascending.
    ///
    /// Repeated query terms count once. IDF is `ln(1 + (N - df + 0.5) / (df + 0.5))`,
    /// which stays positive for every df.
    pub fn search(&self, query: &str, k: usize, params: Bm25Params) -> Vec<(CardId, f64)> {
        let n = self.doc_count();
        if n == 0 || k == 0 {
            return Vec::new();
        }
        let avgdl = self.total_len as f64 / n as f64;
        let mut seen = HashSet::new();
        let mut scores: HashMap<&CardId, f64> = HashMap::new();
        for term in tokenize(query) {
            if !seen.insert(term.clone()) {
                continue;
            }
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = (1.0 + (n as f64 - df + 0.5) / (df + 0.5)).ln();
            for (id, &tf) in list {
                let tf = f64::from(tf);
                let dl = f64::from(self.doc_len[id]);
                let norm = if avgdl > 0.0 { 1.0 - params.b + params.b * dl / avgdl } else { 1.0 };
                *scores.entry(id).or_default() += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
            }
        }
        let mut out: Vec<(CardId, f64)> = scores.into_iter().map(|(id, s)| (id.clone(), s)).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }
}
