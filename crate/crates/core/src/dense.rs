//! Dense retrieval: embedding client, on-disk embedding store and exact
//! inner-product top-k search.
//!
//! Store file layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DWRAGEMB"
//! version  u32      1
//! dim      u32
//! count    u64
//! model    u32 length + UTF-8 bytes
//! ids      count × (u32 length + UTF-8 bytes)
//! vectors  count × dim × f32, row-major
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::CorpusDocument;
use crate::model::{DocId, Passage};
use crate::transport::{HttpError, JsonClient, RetryPolicy};

const MAGIC: &[u8; 8] = b"DWRAGEMB";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DenseError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("embedding endpoint returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding dimension {got} does not match configured {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("malformed embedding response: {0}")]
    Protocol(String),
    #[error("store was built with model {found:?}, expected {expected:?}")]
    Incompatible { expected: String, found: String },
    #[error("store file: {0}")]
    Format(String),
    #[error("checkpoint does not match the corpus: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("scripted embedder: {0}")]
    Scripted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Full URL of an OpenAI-compatible embeddings endpoint.
    pub endpoint_url: String,
    pub model_name: String,
    pub dimension: usize,
    pub batch_size: usize,
    pub timeout_ms: u64,
    /// Concurrent embedding requests.
    pub max_in_flight: usize,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

impl EmbeddingConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>, dimension: usize) -> Self {
        EmbeddingConfig {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            dimension,
            batch_size: 32,
            timeout_ms: 60_000,
            max_in_flight: 4,
            api_key: None,
            retry: RetryPolicy::default(),
        }
    }
}

/// Embedding service contract: a batch of texts in, one vector per text out.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, DenseError>;
}

/// Client for `POST {endpoint}` with body `{"model", "input": [...]}` and
/// response `{"data": [{"index", "embedding": [...]}, ...]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(config: &EmbeddingConfig) -> Self {
        HttpEmbedder {
            endpoint: config.endpoint_url.clone(),
            model: config.model_name.clone(),
            client: JsonClient::new(
                Duration::from_millis(config.timeout_ms),
                config.api_key.clone(),
                config.retry,
            ),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, DenseError> {
        let value = self
            .client
            .post(&self.endpoint, &json!({ "model": self.model, "input": texts }))?;
        let resp: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| DenseError::Protocol(e.to_string()))?;
        let mut items: Vec<(usize, Vec<f32>)> = resp
            .data
            .into_iter()
            .enumerate()
            .map(|(i, it)| (it.index.unwrap_or(i), it.embedding))
            .collect();
        items.sort_by_key(|(i, _)| *i);
        Ok(items.into_iter().map(|(_, v)| v).collect())
    }
}

/// Embedder answering from a fixed text → vector table, with a log of every
/// batch it received and optional failure injection. Unknown texts map to
/// `default` if set.
pub struct ScriptedEmbedder {
    table: BTreeMap<String, Vec<f32>>,
    default: Option<Vec<f32>>,
    fail_calls: Mutex<VecDeque<usize>>,
    log: Mutex<Vec<Vec<String>>>,
}

impl ScriptedEmbedder {
    pub fn new(table: impl IntoIterator<Item = (String, Vec<f32>)>) -> Self {
        ScriptedEmbedder {
            table: table.into_iter().collect(),
            default: None,
            fail_calls: Mutex::new(VecDeque::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_default(mut self, v: Vec<f32>) -> Self {
        self.default = Some(v);
        self
    }

    /// Makes the `n`-th call (1-based, counted over the embedder's lifetime) fail.
    pub fn fail_on_call(self, n: usize) -> Self {
        self.fail_calls.lock().expect("fail list").push_back(n);
        self
    }

    pub fn calls(&self) -> Vec<Vec<String>> {
        self.log.lock().expect("embed log").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("embed log").len()
    }
}

impl Embedder for ScriptedEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, DenseError> {
        let n = {
            let mut log = self.log.lock().expect("embed log");
            log.push(texts.to_vec());
            log.len()
        };
        if self.fail_calls.lock().expect("fail list").contains(&n) {
            return Err(DenseError::Scripted(format!("injected failure on call {n}")));
        }
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .or(self.default.as_ref())
                    .cloned()
                    .ok_or_else(|| DenseError::Scripted(format!("no vector for {t:?}")))
            })
            .collect()
    }
}

fn check_rows(rows: &[Vec<f32>], expected_rows: usize, dim: usize) -> Result<(), DenseError> {
    if rows.len() != expected_rows {
        return Err(DenseError::CountMismatch {
            expected: expected_rows,
            got: rows.len(),
        });
    }
    for r in rows {
        if r.len() != dim {
            return Err(DenseError::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(DenseError::NonFinite);
        }
    }
    Ok(())
}

/// Runs one wave of batches concurrently, returning per-batch results in input order.
fn embed_wave(
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    batches: &[&[String]],
) -> Vec<Result<Vec<Vec<f32>>, DenseError>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = batches
            .iter()
            .map(|batch| {
                s.spawn(move || {
                    let rows = embedder.embed(batch)?;
                    check_rows(&rows, batch.len(), config.dimension)?;
                    Ok(rows)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("embedding worker panicked"))
            .collect()
    })
}

/// Embeds `texts` in batches of `config.batch_size`, up to
/// `config.max_in_flight` requests at once. Rows come back in input order.
pub fn embed_texts(
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    texts: &[String],
) -> Result<Vec<Vec<f32>>, DenseError> {
    if texts.is_empty() {
        return Err(DenseError::Invalid("no texts to embed".into()));
    }
    let batch = config.batch_size.max(1);
    let batches: Vec<&[String]> = texts.chunks(batch).collect();
    let mut rows = Vec::with_capacity(texts.len());
    for wave in batches.chunks(config.max_in_flight.max(1)) {
        for result in embed_wave(config, embedder, wave) {
            rows.extend(result?);
        }
    }
    Ok(rows)
}

/// Text sent to the embedder for a corpus document.
pub fn document_text(doc: &CorpusDocument) -> String {
    if doc.title.is_empty() {
        doc.paragraph_text.clone()
    } else {
        format!("{}\n{}", doc.title, doc.paragraph_text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    model_name: String,
    dimension: usize,
    doc_ids: Vec<DocId>,
    vectors: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(model_name: impl Into<String>, dimension: usize) -> Self {
        EmbeddingStore {
            model_name: model_name.into(),
            dimension,
            doc_ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn from_rows(
        model_name: impl Into<String>,
        dimension: usize,
        rows: Vec<(DocId, Vec<f32>)>,
    ) -> Result<Self, DenseError> {
        let mut store = Self::new(model_name, dimension);
        for (id, v) in rows {
            store.push(id, &v)?;
        }
        Ok(store)
    }

    fn push(&mut self, id: DocId, v: &[f32]) -> Result<(), DenseError> {
        if v.len() != self.dimension {
            return Err(DenseError::DimensionMismatch {
                expected: self.dimension,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DenseError::NonFinite);
        }
        self.doc_ids.push(id);
        self.vectors.extend_from_slice(v);
        Ok(())
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[DocId] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Exact inner product of `query` against row `i`, accumulated in f64.
    pub fn score(&self, i: usize, query: &[f32]) -> f64 {
        self.row(i)
            .iter()
            .zip(query)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(STORE_VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.dimension as u32).unwrap();
        out.write_u64::<LittleEndian>(self.doc_ids.len() as u64).unwrap();
        write_str(&mut out, &self.model_name);
        for id in &self.doc_ids {
            write_str(&mut out, id.as_str());
        }
        for &x in &self.vectors {
            out.write_f32::<LittleEndian>(x).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DenseError> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != MAGIC {
            return Err(DenseError::Format("bad magic".into()));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(fmt_err)?;
        if version != STORE_VERSION {
            return Err(DenseError::Format(format!("unsupported version {version}")));
        }
        let dimension = cur.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
        let count = cur.read_u64::<LittleEndian>().map_err(fmt_err)? as usize;
        let model_name = read_str(&mut cur)?;
        let mut doc_ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            doc_ids.push(DocId(read_str(&mut cur)?));
        }
        let n = count
            .checked_mul(dimension)
            .ok_or_else(|| DenseError::Format("size overflow".into()))?;
        let mut vectors = vec![0f32; n];
        cur.read_f32_into::<LittleEndian>(&mut vectors).map_err(fmt_err)?;
        if (cur.position() as usize) != bytes.len() {
            return Err(DenseError::Format("trailing bytes".into()));
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(DenseError::NonFinite);
        }
        Ok(EmbeddingStore {
            model_name,
            dimension,
            doc_ids,
            vectors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DenseError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Loads a store, rejecting one built with a different embedding model.
    pub fn load(path: &Path, expected_model: &str) -> Result<Self, DenseError> {
        let store = Self::from_bytes(&std::fs::read(path)?)?;
        if store.model_name != expected_model {
            return Err(DenseError::Incompatible {
                expected: expected_model.into(),
                found: store.model_name,
            });
        }
        Ok(store)
    }
}

fn fmt_err(e: std::io::Error) -> DenseError {
    DenseError::Format(e.to_string())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(cur: &mut Cursor<&[u8]>) -> Result<String, DenseError> {
    let len = cur.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(DenseError::Format("string runs past end of file".into()));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(fmt_err)?;
    String::from_utf8(buf).map_err(|e| DenseError::Format(e.to_string()))
}

/// Embeds every document into a new store.
///
/// With a checkpoint path, rows are flushed there after each wave of
/// requests, and a later call resumes after the rows already present.
pub fn build_embedding_store(
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    docs: &[CorpusDocument],
    checkpoint: Option<&Path>,
) -> Result<EmbeddingStore, DenseError> {
    if docs.is_empty() {
        return Err(DenseError::Invalid("no documents".into()));
    }
    let mut store = match checkpoint {
        Some(p) if p.exists() => {
            let s = EmbeddingStore::load(p, &config.model_name)?;
            if s.dimension != config.dimension {
                return Err(DenseError::DimensionMismatch {
                    expected: config.dimension,
                    got: s.dimension,
                });
            }
            if s.len() > docs.len()
                || s.doc_ids.iter().zip(docs).any(|(a, d)| a != &d.id)
            {
                return Err(DenseError::Checkpoint("ids are not a prefix of the corpus".into()));
            }
            tracing::info!(done = s.len(), total = docs.len(), "resuming embedding");
            s
        }
        _ => EmbeddingStore::new(config.model_name.clone(), config.dimension),
    };

    let remaining = &docs[store.len()..];
    let texts: Vec<String> = remaining.iter().map(document_text).collect();
    let batches: Vec<&[String]> = texts.chunks(config.batch_size.max(1)).collect();
    let mut next = store.len();
    for wave in batches.chunks(config.max_in_flight.max(1)) {
        let mut failure = None;
        for result in embed_wave(config, embedder, wave) {
            match result {
                Ok(rows) if failure.is_none() => {
                    for row in rows {
                        store.push(docs[next].id.clone(), &row)?;
                        next += 1;
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(p) = checkpoint {
            store.save(p)?;
        }
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(store)
}

/// Exact top-k by inner product; ties broken by ascending doc id.
/// Returned passages carry ids and scores only; callers attach text.
pub fn dense_search(
    store: &EmbeddingStore,
    config: &EmbeddingConfig,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
) -> Result<Vec<Passage>, DenseError> {
    if k < 1 {
        return Err(DenseError::Invalid("k must be >= 1".into()));
    }
    let rows = embed_texts(config, embedder, &[query.to_string()])?;
    if store.dimension != config.dimension {
        return Err(DenseError::DimensionMismatch {
            expected: store.dimension,
            got: config.dimension,
        });
    }
    Ok(search_vector(store, &rows[0], k))
}

/// Top-k search with an already-embedded query vector.
pub fn search_vector(store: &EmbeddingStore, query: &[f32], k: usize) -> Vec<Passage> {
    let mut scored: Vec<(usize, f64)> = (0..store.len()).map(|i| (i, store.score(i, query))).collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| store.doc_ids[a.0].cmp(&store.doc_ids[b.0]))
    });
    scored.truncate(k);
    scored
        .into_iter()
        .enumerate()
        .map(|(rank, (i, score))| Passage {
            id: store.doc_ids[i].clone(),
            title: String::new(),
            text: String::new(),
            source_rank: rank as u32 + 1,
            score,
        })
        .collect()
}
