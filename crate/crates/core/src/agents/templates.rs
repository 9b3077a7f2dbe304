//! Prompt templates with `{name}` placeholders.
//!
//! A placeholder is `{` + identifier (`[A-Za-z_][A-Za-z0-9_]*`) + `}`; any
//! other brace is literal text. Substitution is single pass, so values that
//! themselves contain `{...}` are inserted verbatim.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template}: missing value for placeholder {{{name}}}")]
    Missing { template: String, name: String },
    #[error("unknown template {0:?}")]
    Unknown(String),
    #[error("template catalog {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: Vec<String>,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut last = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            let ident_ok = j > start && !bytes[start].is_ascii_digit();
            if j < bytes.len() && bytes[j] == b'}' && ident_ok {
                if last < i {
                    out.push(Piece::Text(&body[last..i]));
                }
                out.push(Piece::Slot(&body[start..j]));
                i = j + 1;
                last = i;
                continue;
            }
        }
        i += 1;
    }
    if last < body.len() {
        out.push(Piece::Text(&body[last..]));
    }
    out
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let mut required: Vec<String> = Vec::new();
        for p in pieces(&body) {
            if let Piece::Slot(s) = p {
                if !required.iter().any(|r| r == s) {
                    required.push(s.to_string());
                }
            }
        }
        PromptTemplate {
            name: name.into(),
            body,
            required_placeholders: required,
        }
    }

    /// Fills every placeholder; fails if any required value is absent.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        for p in pieces(&self.body) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let v = values
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::Missing {
                            template: self.name.clone(),
                            name: name.to_string(),
                        })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

pub const CONTEXT_MANAGER: &str = "context_manager";
pub const ANSWER_GENERATOR: &str = "answer_generator";
pub const QUERY_REWRITER: &str = "query_rewriter";
pub const ANSWER_SELECTION: &str = "answer_selection";
pub const CONTEXT_MERGE: &str = "context_merge";
pub const ANSWER_EVALUATOR: &str = "answer_evaluator";

pub const TEMPLATE_NAMES: [&str; 6] = [
    CONTEXT_MANAGER,
    ANSWER_GENERATOR,
    QUERY_REWRITER,
    ANSWER_SELECTION,
    CONTEXT_MERGE,
    ANSWER_EVALUATOR,
];

const CONTEXT_MANAGER_BODY: &str = "Act as the context manager for a Retrieval-Augmented Generation (RAG) system. Your job is to maintain a single, up-to-date note that contains all the information relevant to answering the original query. Please ensure that the note includes all original text information useful for answering the question.

Steps:
- Based on the retrieved documents, supplement the notes with content not yet included but useful for answering the question.
- Resolve conflicts: if statements disagree, keep the most reliable or recent version.

End your response with the literal tag [END].

Original query: {query}

Old note: {note}

New information: {new_context}

Updated note:";

const ANSWER_GENERATOR_BODY: &str = "Answer the question based on the given notes.
Output ONLY the exact answer in as few words as possible.
Do not include the question, reasoning, or any extra text.
End your response with the literal tag [END].


The following are given notes:
{note}

Question: {query}
Answer:";

const QUERY_REWRITER_BODY: &str = "You are an intelligent assistant in a Retrieval-Augmented Generation (RAG) system. Your goal is to (a) diagnose retrieval needs for the current question and (b) produce exactly {N} rewritten queries, each paired with the most suitable retrieval strategy for that specific rewrite.

Information:
- Original Query: {query}
- Current Query: {current_query}
- Context: {context}

Available Retrieval Strategies:
- bm25 (sparse / lexical): Prioritizes exact token and phrase matches.
- dense (semantic / vector similarity): Matches by meaning despite paraphrases.

Instructions:
1. Use the context to reflect on what is missing to answer the query. Think about both the big picture and the small atomic facts that might need verification.
2. Generate exactly {N} rewritten queries.
   - Do not just paraphrase \u{2014} each query should explore a different angle, granularity, or fact.
   - Avoid near-duplicates.
   - Each query must serve a distinct retrieval purpose.
3. For each query, select the most suitable retrieval strategy:
   - Use bm25 when exact names, phrases, or quoted terms matter; remove \"wh\" words.
   - Use dense when searching for meanings, definitions, or related concepts.

Output Format (strict):
1. First provide your analysis and rationale in a <think> block, including per-item strategy justification.
2. Then output exactly {N} query rewrites using the following structure:
<queries>
  <item rank=\"1\"><strategy>bm25|dense</strategy>
    <query>...</query>
  </item>
  <item rank=\"2\"><strategy>bm25|dense</strategy>
    <query>...</query>
  </item>
  ...
  <item rank=\"{N}\"><strategy>bm25|dense</strategy>
    <query>...</query>
  </item>
</queries>
3. End your response with the literal tag [END].

Output:";

const ANSWER_SELECTION_BODY: &str = "Question: {question}

All Generated Answers:
{answer_blocks}

Based on all the answers and reasoning provided, select the best answer. Consider accuracy and relevance to the question. Give the final answer directly. Then, provide a direct, concise, and accurate answer inside <answer> </answer> tags. End your response with the literal tag [END].

Final answer:";

const CONTEXT_MERGE_BODY: &str = "You are an expert at combining contexts in a Retrieval Augmented Generation system for answering question {question}. Here are several notes: {reasoning_list}.
Combine the above notes into a single note that includes all information and is useful for final answer generation. Please ensure that the note includes all original text information useful for answering the question. End your response with the literal tag [END].
Your response:";

const ANSWER_EVALUATOR_BODY: &str = "You are the answer evaluator in a Retrieval-Augmented Generation (RAG) system. Judge whether the candidate answer correctly answers the original query and is supported by the note.

Original query: {query}
Current query: {current_query}
Candidate answer: {answer}

Note: {note}

Reply with a single word: STOP if the answer is correct and grounded in the note, or CONTINUE if more evidence is needed. End your response with the literal tag [END].

Decision:";

/// The six agent templates, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCatalog {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateCatalog {
    fn default() -> Self {
        let defaults = [
            (CONTEXT_MANAGER, CONTEXT_MANAGER_BODY),
            (ANSWER_GENERATOR, ANSWER_GENERATOR_BODY),
            (QUERY_REWRITER, QUERY_REWRITER_BODY),
            (ANSWER_SELECTION, ANSWER_SELECTION_BODY),
            (CONTEXT_MERGE, CONTEXT_MERGE_BODY),
            (ANSWER_EVALUATOR, ANSWER_EVALUATOR_BODY),
        ];
        TemplateCatalog {
            templates: defaults
                .into_iter()
                .map(|(n, b)| (n.to_string(), PromptTemplate::new(n, b)))
                .collect(),
        }
    }
}

impl TemplateCatalog {
    pub fn get(&self, name: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }

    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.get(name)?.render(values)
    }

    pub fn set(&mut self, template: PromptTemplate) -> Result<(), TemplateError> {
        if !TEMPLATE_NAMES.contains(&template.name.as_str()) {
            return Err(TemplateError::Unknown(template.name));
        }
        self.templates.insert(template.name.clone(), template);
        Ok(())
    }

    /// Defaults overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let io = |message: String| TemplateError::Io {
            path: dir.display().to_string(),
            message,
        };
        if !dir.is_dir() {
            return Err(io("not a directory".into()));
        }
        let mut catalog = Self::default();
        for name in TEMPLATE_NAMES {
            let p = dir.join(format!("{name}.txt"));
            if p.exists() {
                let body = std::fs::read_to_string(&p).map_err(|e| io(e.to_string()))?;
                catalog.set(PromptTemplate::new(name, body.trim_end_matches('\n')))?;
            }
        }
        Ok(catalog)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), TemplateError> {
        let io = |message: String| TemplateError::Io {
            path: dir.display().to_string(),
            message,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
        for t in self.templates.values() {
            std::fs::write(dir.join(format!("{}.txt", t.name)), format!("{}\n", t.body))
                .map_err(|e| io(e.to_string()))?;
        }
        Ok(())
    }

    /// Stable digest of all template bodies, for run manifests.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.templates.values() {
            h.update(t.name.as_bytes());
            h.update([0]);
            h.update(t.body.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn required_placeholders_extracted() {
        let t = PromptTemplate::new("t", "a {x} b {y} {x} {not closed {1z} {}");
        assert_eq!(t.required_placeholders, vec!["x", "y"]);
    }

    #[test]
    fn render_substitutes_once() {
        let t = PromptTemplate::new("t", "Q: {q} / {q}");
        assert_eq!(t.render(&[("q", "{q}")]).unwrap(), "Q: {q} / {q}");
    }

    #[test]
    fn render_fails_on_missing() {
        let t = PromptTemplate::new("t", "{a}{b}");
        assert_eq!(
            t.render(&[("a", "1")]),
            Err(TemplateError::Missing {
                template: "t".into(),
                name: "b".into()
            })
        );
    }

    #[test]
    fn default_placeholders() {
        let c = TemplateCatalog::default();
        let req = |n: &str| c.get(n).unwrap().required_placeholders.clone();
        assert_eq!(req(CONTEXT_MANAGER), vec!["query", "note", "new_context"]);
        assert_eq!(req(ANSWER_GENERATOR), vec!["note", "query"]);
        assert_eq!(req(QUERY_REWRITER), vec!["N", "query", "current_query", "context"]);
        assert_eq!(req(ANSWER_SELECTION), vec!["question", "answer_blocks"]);
        assert_eq!(req(CONTEXT_MERGE), vec!["question", "reasoning_list"]);
        assert_eq!(req(ANSWER_EVALUATOR), vec!["query", "current_query", "answer", "note"]);
        for n in TEMPLATE_NAMES {
            assert!(c.get(n).unwrap().body.contains("[END]"), "{n}");
        }
    }

    #[test]
    fn rewriter_renders_width_everywhere() {
        let c = TemplateCatalog::default();
        let out = c
            .render(
                QUERY_REWRITER,
                &[("N", "3"), ("query", "q"), ("current_query", "c"), ("context", "")],
            )
            .unwrap();
        assert!(out.contains("produce exactly 3 rewritten queries"));
        assert!(out.contains("<item rank=\"3\">"));
        assert!(!out.contains("{N}"));
    }

    #[test]
    fn catalog_dir_round_trip_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let c = TemplateCatalog::default();
        c.write_dir(dir.path()).unwrap();
        assert_eq!(TemplateCatalog::load_dir(dir.path()).unwrap(), c);
        std::fs::write(dir.path().join("answer_generator.txt"), "Notes {note} Q {query} [END]").unwrap();
        let c2 = TemplateCatalog::load_dir(dir.path()).unwrap();
        assert_eq!(c2.get(ANSWER_GENERATOR).unwrap().body, "Notes {note} Q {query} [END]");
        assert_ne!(c2.digest(), c.digest());
    }
}
