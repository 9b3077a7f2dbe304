use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::Analyzer;
use super::{CorpusDocument, CorpusError};
use crate::model::{DocId, Passage};

/// Question words removed from sparse queries before scoring.
pub const WH_WORDS: &[&str] = &["what", "where", "when", "who", "whom", "which", "why", "how"];

const INDEX_FORMAT: &str = "dwrag-bm25";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Multiplier applied to term frequencies contributed by the title.
    pub title_weight: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.2,
            b: 0.75,
            title_weight: 1.0,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(CorpusError::InvalidParams(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(CorpusError::InvalidParams(format!("b must be in [0,1], got {}", self.b)));
        }
        if !(self.title_weight >= 0.0 && self.title_weight.is_finite()) {
            return Err(CorpusError::InvalidParams(format!(
                "title_weight must be >= 0, got {}",
                self.title_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    /// Ordinal of the document in the index.
    pub doc: u32,
    pub tf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredDoc {
    id: DocId,
    title: String,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    params: Bm25Params,
    remove_stopwords: bool,
    stemmer: Option<String>,
    avg_doc_length: f64,
    docs: Vec<StoredDoc>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
}

/// Inverted index over title + paragraph text.
///
/// Document length counts title and body tokens. Title occurrences add
/// `title_weight` to a term's frequency, body occurrences add 1.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    analyzer: Analyzer,
    docs: Vec<StoredDoc>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

pub fn build_bm25_index(
    docs: &[CorpusDocument],
    params: Bm25Params,
    analyzer: Analyzer,
) -> Result<Bm25Index, CorpusError> {
    params.validate()?;
    if docs.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(docs.len());
    let mut stored = Vec::with_capacity(docs.len());

    for (ordinal, doc) in docs.iter().enumerate() {
        let title_terms = analyzer.tokenize(&doc.title);
        let body_terms = analyzer.tokenize(&doc.paragraph_text);
        doc_lengths.push((title_terms.len() + body_terms.len()) as u32);

        let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
        for t in &title_terms {
            *tf.entry(t.as_str()).or_default() += params.title_weight;
        }
        for t in &body_terms {
            *tf.entry(t.as_str()).or_default() += 1.0;
        }
        for (term, freq) in tf {
            if freq > 0.0 {
                postings.entry(term.to_string()).or_default().push(Posting {
                    doc: ordinal as u32,
                    tf: freq,
                });
            }
        }
        stored.push(StoredDoc {
            id: doc.id.clone(),
            title: doc.title.clone(),
            text: doc.paragraph_text.clone(),
        });
    }
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    let avg_doc_length = total as f64 / doc_lengths.len() as f64;
    Ok(Bm25Index {
        params,
        analyzer,
        docs: stored,
        doc_lengths,
        avg_doc_length,
        postings,
    })
}

impl Bm25Index {
    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, id: &DocId) -> Option<u32> {
        self.ordinal(id).map(|o| self.doc_lengths[o])
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &DocId> {
        self.docs.iter().map(|d| &d.id)
    }

    /// Postings for `term` as (doc id, term frequency).
    pub fn postings(&self, term: &str) -> Vec<(DocId, f64)> {
        self.postings
            .get(term)
            .map(|ps| {
                ps.iter()
                    .map(|p| (self.docs[p.doc as usize].id.clone(), p.tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn ordinal(&self, id: &DocId) -> Option<usize> {
        self.docs.iter().position(|d| &d.id == id)
    }

    /// Non-negative Okapi idf: ln(1 + (N - n + 0.5) / (n + 0.5)).
    pub fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = doc_freq as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Query terms after analysis, wh-word removal and de-duplication.
    pub fn query_terms(&self, query: &str) -> Vec<String> {
        let mut seen = HashSet::new();
        self.analyzer
            .tokenize(query)
            .into_iter()
            .filter(|t| !WH_WORDS.contains(&t.as_str()))
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            params: self.params,
            remove_stopwords: self.analyzer.remove_stopwords,
            stemmer: self.analyzer.stemmer_name().map(str::to_string),
            avg_doc_length: self.avg_doc_length,
            docs: self.docs.clone(),
            doc_lengths: self.doc_lengths.clone(),
            postings: self.postings.clone(),
        };
        serde_json::to_vec(&file).expect("index serializes")
    }

    /// Decodes an index. A stemmed index needs the same stemmer attached to `analyzer`.
    pub fn from_bytes(bytes: &[u8], analyzer: Analyzer) -> Result<Self, CorpusError> {
        let file: IndexFile =
            serde_json::from_slice(bytes).map_err(|e| CorpusError::Format(e.to_string()))?;
        if file.format != INDEX_FORMAT {
            return Err(CorpusError::Format(format!("not a bm25 index: {}", file.format)));
        }
        if file.version != INDEX_VERSION {
            return Err(CorpusError::Format(format!(
                "unsupported index version {} (expected {INDEX_VERSION})",
                file.version
            )));
        }
        if file.stemmer.as_deref() != analyzer.stemmer_name() {
            return Err(CorpusError::Format(format!(
                "index built with stemmer {:?}, analyzer has {:?}",
                file.stemmer,
                analyzer.stemmer_name()
            )));
        }
        if file.docs.len() != file.doc_lengths.len() {
            return Err(CorpusError::Format("doc table and length table differ".into()));
        }
        let mut analyzer = analyzer;
        analyzer.remove_stopwords = file.remove_stopwords;
        Ok(Bm25Index {
            params: file.params,
            analyzer,
            docs: file.docs,
            doc_lengths: file.doc_lengths,
            avg_doc_length: file.avg_doc_length,
            postings: file.postings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, analyzer: Analyzer) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, analyzer)
    }
}

/// Top-k BM25 search. Only documents sharing at least one term with the
/// query are returned; ties are broken by ascending doc id.
pub fn bm25_search(index: &Bm25Index, query: &str, k: usize) -> Result<Vec<Passage>, CorpusError> {
    if k < 1 {
        return Err(CorpusError::InvalidK);
    }
    let terms = index.query_terms(query);
    if terms.is_empty() {
        return Ok(Vec::new());
    }
    let Bm25Params { k1, b, .. } = index.params;
    let mut scores = vec![0.0f64; index.docs.len()];
    let mut matched = vec![false; index.docs.len()];
    for term in &terms {
        let Some(plist) = index.postings.get(term) else {
            continue;
        };
        let idf = index.idf(plist.len());
        for p in plist {
            let d = p.doc as usize;
            let len_norm = 1.0 - b + b * index.doc_lengths[d] as f64 / index.avg_doc_length;
            scores[d] += idf * p.tf * (k1 + 1.0) / (p.tf + k1 * len_norm);
            matched[d] = true;
        }
    }
    let mut hits: Vec<usize> = (0..index.docs.len()).filter(|&d| matched[d]).collect();
    hits.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| index.docs[a].id.cmp(&index.docs[b].id))
    });
    hits.truncate(k);
    Ok(hits
        .into_iter()
        .enumerate()
        .map(|(i, d)| Passage {
            id: index.docs[d].id.clone(),
            title: index.docs[d].title.clone(),
            text: index.docs[d].text.clone(),
            source_rank: i as u32 + 1,
            score: scores[d],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str, text: &str) -> CorpusDocument {
        CorpusDocument {
            id: DocId::from(id),
            title: title.into(),
            paragraph_text: text.into(),
            is_abstract: false,
            url: None,
        }
    }

    fn build(docs: &[CorpusDocument]) -> Bm25Index {
        build_bm25_index(docs, Bm25Params::default(), Analyzer::default()).unwrap()
    }

    #[test]
    fn single_doc_postings() {
        let idx = build(&[doc("d1", "", "a b a")]);
        assert_eq!(idx.postings("a"), vec![(DocId::from("d1"), 2.0)]);
        assert_eq!(idx.postings("b"), vec![(DocId::from("d1"), 1.0)]);
        assert_eq!(idx.avg_doc_length(), 3.0);
    }

    #[test]
    fn average_length() {
        let idx = build(&[doc("d1", "", "x y z"), doc("d2", "", "p q r s t")]);
        assert_eq!(idx.avg_doc_length(), 4.0);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(
            build_bm25_index(&[], Bm25Params::default(), Analyzer::default()),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn title_weight_multiplies_title_tf() {
        let p = Bm25Params {
            title_weight: 2.5,
            ..Bm25Params::default()
        };
        let idx = build_bm25_index(&[doc("d1", "Paris", "paris city")], p, Analyzer::default()).unwrap();
        assert_eq!(idx.postings("paris"), vec![(DocId::from("d1"), 3.5)]);
        assert_eq!(idx.doc_length(&DocId::from("d1")), Some(3));
    }

    #[test]
    fn wh_word_contributes_nothing() {
        let idx = build(&[
            doc("d1", "", "where the river flows"),
            doc("d2", "", "the capital of france"),
            doc("d3", "", "nothing here"),
        ]);
        let hits = bm25_search(&idx, "where is the capital", 6).unwrap();
        assert_eq!(hits[0].id.as_str(), "d2");
        let with = bm25_search(&idx, "where capital", 6).unwrap();
        let without = bm25_search(&idx, "capital", 6).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn k_zero_is_error_and_empty_query_is_empty() {
        let idx = build(&[doc("d1", "", "alpha")]);
        assert!(matches!(bm25_search(&idx, "alpha", 0), Err(CorpusError::InvalidK)));
        assert!(bm25_search(&idx, "who what", 3).unwrap().is_empty());
    }

    #[test]
    fn returns_six_when_enough_match() {
        let docs: Vec<_> = (0..10).map(|i| doc(&format!("d{i:02}"), "", &format!("river {i}"))).collect();
        let idx = build(&docs);
        let hits = bm25_search(&idx, "river", 6).unwrap();
        assert_eq!(hits.len(), 6);
        // all equal scores -> ascending id order
        let ids: Vec<_> = hits.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["d00", "d01", "d02", "d03", "d04", "d05"]);
        assert_eq!(hits[5].source_rank, 6);
    }

    #[test]
    fn serialization_is_deterministic_and_round_trips() {
        let docs = vec![doc("b", "T", "one two two"), doc("a", "U", "three one")];
        let a = build(&docs).to_bytes();
        let b = build(&docs).to_bytes();
        assert_eq!(a, b);
        let back = Bm25Index::from_bytes(&a, Analyzer::default()).unwrap();
        assert_eq!(back.to_bytes(), a);
        assert_eq!(
            bm25_search(&back, "one", 5).unwrap(),
            bm25_search(&build(&docs), "one", 5).unwrap()
        );
    }
}
