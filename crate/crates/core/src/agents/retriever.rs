use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::corpus::{bm25_search, Bm25Index, CorpusDocument, CorpusError};
use crate::dense::{dense_search, DenseError, Embedder, EmbeddingConfig, EmbeddingStore};
use crate::model::{DocId, Flag, Flags, Passage, RetrievalStrategy};

/// Default passages per retrieval call.
pub const DEFAULT_RETRIEVAL_K: usize = 6;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Sparse(#[from] CorpusError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error("no retrieval index configured")]
    NoIndex,
}

/// Title and text of every document, for filling dense hits.
#[derive(Debug, Clone, Default)]
pub struct DocTable(HashMap<DocId, (String, String)>);

impl DocTable {
    pub fn from_documents(docs: &[CorpusDocument]) -> Self {
        DocTable(
            docs.iter()
                .map(|d| (d.id.clone(), (d.title.clone(), d.paragraph_text.clone())))
                .collect(),
        )
    }

    pub fn insert(&mut self, id: DocId, title: String, text: String) {
        self.0.insert(id, (title, text));
    }

    pub fn get(&self, id: &DocId) -> Option<(&str, &str)> {
        self.0.get(id).map(|(t, x)| (t.as_str(), x.as_str()))
    }
}

#[derive(Clone)]
pub struct DenseHandle {
    pub store: Arc<EmbeddingStore>,
    pub config: EmbeddingConfig,
    pub embedder: Arc<dyn Embedder>,
    pub docs: Arc<DocTable>,
}

/// Dispatches a (strategy, query) pair to the sparse or dense index.
#[derive(Clone, Default)]
pub struct Retriever {
    pub sparse: Option<Arc<Bm25Index>>,
    pub dense: Option<DenseHandle>,
}

impl Retriever {
    pub fn sparse(index: Arc<Bm25Index>) -> Self {
        Retriever {
            sparse: Some(index),
            dense: None,
        }
    }

    pub fn has(&self, strategy: RetrievalStrategy) -> bool {
        match strategy {
            RetrievalStrategy::Sparse => self.sparse.is_some(),
            RetrievalStrategy::Dense => self.dense.is_some(),
        }
    }

    /// Top-k passages for `query`. When the requested index is missing the
    /// other one is used and [`Flag::StrategyFallback`] is returned.
    pub fn retrieve(
        &self,
        strategy: RetrievalStrategy,
        query: &str,
        k: usize,
    ) -> Result<(Vec<Passage>, Flags), RetrieveError> {
        let mut flags = Flags::new();
        let effective = if self.has(strategy) {
            strategy
        } else {
            flags.insert(Flag::StrategyFallback);
            match strategy {
                RetrievalStrategy::Sparse => RetrievalStrategy::Dense,
                RetrievalStrategy::Dense => RetrievalStrategy::Sparse,
            }
        };
        let passages = match effective {
            RetrievalStrategy::Sparse => {
                let index = self.sparse.as_ref().ok_or(RetrieveError::NoIndex)?;
                bm25_search(index, query, k)?
            }
            RetrievalStrategy::Dense => {
                let d = self.dense.as_ref().ok_or(RetrieveError::NoIndex)?;
                let mut hits = dense_search(&d.store, &d.config, d.embedder.as_ref(), query, k)?;
                for p in &mut hits {
                    if let Some((title, text)) = d.docs.get(&p.id) {
                        p.title = title.to_string();
                        p.text = text.to_string();
                    }
                }
                hits
            }
        };
        Ok((passages, flags))
    }
}
