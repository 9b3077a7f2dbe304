//! Corpus ingestion and the sparse (BM25) retrieval path.

mod bm25;
mod tokenize;

pub use bm25::{bm25_search, build_bm25_index, Bm25Index, Bm25Params, Posting, WH_WORDS};
pub use tokenize::{tokenize, Analyzer, Stemmer, STOPWORDS};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DocId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate document id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("invalid bm25 parameters: {0}")]
    InvalidParams(String),
    #[error("index format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub id: DocId,
    pub title: String,
    pub paragraph_text: String,
    #[serde(default)]
    pub is_abstract: bool,
    #[serde(default)]
    pub url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(CorpusFormat::Jsonl),
            "tsv" => Some(CorpusFormat::Tsv),
            _ => None,
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(format!("unknown corpus format {other:?} (expected jsonl or tsv)")),
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: serde_json::Value,
    #[serde(default)]
    title: String,
    #[serde(alias = "text")]
    paragraph_text: String,
    #[serde(default)]
    is_abstract: bool,
    #[serde(default)]
    url: Option<String>,
}

pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<CorpusDocument>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut seen: HashMap<DocId, usize> = HashMap::new();
    // Column positions for (id, title, text); a DPR header reorders them.
    let mut columns = (0usize, 1usize, 2usize);

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            CorpusFormat::Jsonl => parse_jsonl(&line, lineno)?,
            CorpusFormat::Tsv => {
                if lineno == 1 {
                    if let Some(cols) = tsv_header(&line) {
                        columns = cols;
                        continue;
                    }
                }
                parse_tsv(&line, lineno, columns)?
            }
        };
        if let Some(first) = seen.insert(doc.id.clone(), lineno) {
            return Err(CorpusError::DuplicateId {
                id: doc.id.0,
                first,
                second: lineno,
            });
        }
        docs.push(doc);
    }
    tracing::info!(path = %path.display(), documents = docs.len(), "corpus ingested");
    Ok(docs)
}

fn parse_jsonl(line: &str, lineno: usize) -> Result<CorpusDocument, CorpusError> {
    let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
        line: lineno,
        message: e.to_string(),
    })?;
    let id = match rec.id {
        serde_json::Value::String(s) => s,
        serde_json::Value::Number(n) => n.to_string(),
        other => {
            return Err(CorpusError::Malformed {
                line: lineno,
                message: format!("id must be a string or number, got {other}"),
            })
        }
    };
    finish_doc(id, rec.title, rec.paragraph_text, rec.is_abstract, rec.url, lineno)
}

fn tsv_header(line: &str) -> Option<(usize, usize, usize)> {
    let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
    let pos = |names: &[&str]| cols.iter().position(|c| names.contains(c));
    Some((
        pos(&["id"])?,
        pos(&["title"])?,
        pos(&["paragraph_text", "text"])?,
    ))
}

fn parse_tsv(
    line: &str,
    lineno: usize,
    (id_col, title_col, text_col): (usize, usize, usize),
) -> Result<CorpusDocument, CorpusError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(CorpusError::Malformed {
            line: lineno,
            message: format!("expected 3 tab-separated columns, found {}", fields.len()),
        });
    }
    finish_doc(
        fields[id_col].trim().to_string(),
        fields[title_col].trim().trim_matches('"').to_string(),
        fields[text_col].trim().trim_matches('"').to_string(),
        false,
        None,
        lineno,
    )
}

fn finish_doc(
    id: String,
    title: String,
    paragraph_text: String,
    is_abstract: bool,
    url: Option<String>,
    lineno: usize,
) -> Result<CorpusDocument, CorpusError> {
    if id.is_empty() {
        return Err(CorpusError::Malformed {
            line: lineno,
            message: "empty id".into(),
        });
    }
    if paragraph_text.trim().is_empty() {
        return Err(CorpusError::Malformed {
            line: lineno,
            message: "empty paragraph_text".into(),
        });
    }
    Ok(CorpusDocument {
        id: DocId(id),
        title,
        paragraph_text,
        is_abstract,
        url,
    })
}
