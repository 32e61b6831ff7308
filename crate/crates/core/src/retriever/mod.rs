//! Demonstration retrieval.
//!
//! Every retriever produces a [`ContextSet`]: ordered index-split ids per
//! test example (instance level) or one list shared by the whole test split
//! (corpus level).

mod bm25;
mod embedding;
mod mdl;
mod random;
mod votek;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::prompt::PromptError;

pub use bm25::{bm25_contexts, bm25_retrieve, bm25_tokenize, Bm25Index};
pub use embedding::{embed_corpus, embedding_hash, topk_ranked, topk_retrieve, topk_retrieve_ordered, EmbeddingMatrix, EmbeddingStore};
pub use mdl::{label_entropy, mdl_contexts, mdl_rerank, MdlOptions};
pub use random::random_retrieve;
pub use votek::{knn_graph, votek_select};

#[derive(Debug, thiserror::Error)]
pub enum RetrieverError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot select {select_k} examples from {available}")]
    SelectKTooLarge { select_k: usize, available: usize },
    #[error("label space is empty")]
    EmptyLabelSpace,
    #[error("no candidate contexts")]
    NoCandidates,
    #[error("invalid context set: {0}")]
    InvalidContexts(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("embedding cache: {0}")]
    Store(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    InstanceLevel,
    CorpusLevel,
}

/// In-prompt order of similarity-ranked demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Most similar demonstration sits right before the query.
    #[default]
    NearestLast,
    NearestFirst,
}

impl DemoOrder {
    /// Arranges a most-similar-first ranking for the prompt.
    pub fn arrange(self, mut ranked: Vec<usize>) -> Vec<usize> {
        if self == DemoOrder::NearestLast {
            ranked.reverse();
        }
        ranked
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSet {
    pub mode: ContextMode,
    pub ice_num: usize,
    pub contexts: Vec<Vec<usize>>,
}

impl ContextSet {
    pub fn instance_level(ice_num: usize, contexts: Vec<Vec<usize>>) -> Self {
        Self { mode: ContextMode::InstanceLevel, ice_num, contexts }
    }

    pub fn corpus_level(ice_num: usize, context: Vec<usize>) -> Self {
        Self { mode: ContextMode::CorpusLevel, ice_num, contexts: vec![context] }
    }

    /// Demonstration ids for `test_id`, in prompt order.
    pub fn context_for(&self, test_id: usize) -> &[usize] {
        match self.mode {
            ContextMode::InstanceLevel => &self.contexts[test_id],
            ContextMode::CorpusLevel => &self.contexts[0],
        }
    }

    /// Checks ids, duplicates and sizes against the dataset shape.
    pub fn validate(&self, index_size: usize, test_size: usize) -> Result<(), RetrieverError> {
        let expected_lists = match self.mode {
            ContextMode::InstanceLevel => test_size,
            ContextMode::CorpusLevel => 1,
        };
        if self.contexts.len() != expected_lists {
            return Err(RetrieverError::InvalidContexts(format!(
                "{} context lists for {expected_lists} expected",
                self.contexts.len()
            )));
        }
        let want = self.ice_num.min(index_size);
        for (t, ctx) in self.contexts.iter().enumerate() {
            if ctx.len() != want {
                return Err(RetrieverError::InvalidContexts(format!(
                    "context {t} has {} ids, expected {want}",
                    ctx.len()
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for &id in ctx {
                if id >= index_size {
                    return Err(RetrieverError::InvalidContexts(format!("context {t}: id {id} out of range")));
                }
                if !seen.insert(id) {
                    return Err(RetrieverError::InvalidContexts(format!("context {t}: duplicate id {id}")));
                }
            }
        }
        Ok(())
    }
}
