//! Insight recall engine.
//!
//! Given a new problem, recalls a learner's most relevant past insights from a
//! personal knowledge graph: three recall channels (vector, fulltext, tag
//! hierarchy) are fused, reranked according to a learning mode, and filtered
//! by a language-model similarity judgement before being presented.

pub mod embedding;
pub mod graph;
pub mod recall;
pub mod text;
pub mod llm;
pub mod rerank;
pub mod tagmap;
pub mod config;
pub mod workflow;
