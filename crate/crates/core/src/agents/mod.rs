//! The agent operators: query rewriting, retrieval dispatch, memory update,
//! answer generation, answer evaluation, branch selection and memory merge.
//!
//! Each LLM-backed operator renders its template, issues one generation
//! call (the rewriter may issue a second, repair call), strips the output at
//! the first `[END]` and returns the parsed value with its flags and cost.

mod retriever;
pub mod templates;

pub use retriever::{DenseHandle, DocTable, RetrieveError, Retriever, DEFAULT_RETRIEVAL_K};
pub use templates::{PromptTemplate, TemplateCatalog, TemplateError};

use std::sync::{Arc, OnceLock};

use regex::Regex;
use thiserror::Error;

use crate::evalkit::normalize_answer;
use crate::llm::{GenerationRequest, LlmBackend, LlmError, SamplingConfig, END_TAG};
use crate::model::{
    AnswerCandidate, BranchOutcome, CallKind, CostLedger, Decision, Flag, Flags, MemoryState,
    Passage, Query, RetrievalStrategy, RewriteItem, Signal, DEFAULT_NOTE_CHAR_CAP,
};
use templates::{
    ANSWER_EVALUATOR, ANSWER_GENERATOR, ANSWER_SELECTION, CONTEXT_MANAGER, CONTEXT_MERGE,
    QUERY_REWRITER,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// An operator's result together with its flags and the cost of its calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Called<T> {
    pub value: T,
    pub flags: Flags,
    pub cost: CostLedger,
}

impl<T> Called<T> {
    fn free(value: T) -> Self {
        Called {
            value,
            flags: Flags::new(),
            cost: CostLedger::default(),
        }
    }
}

/// Text before the first `[END]`, trimmed, and whether the tag was present.
pub fn strip_terminator(raw: &str) -> (String, bool) {
    match raw.find(END_TAG) {
        Some(pos) => (raw[..pos].trim().to_string(), true),
        None => (raw.trim().to_string(), false),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteSet {
    pub items: Vec<RewriteItem>,
    pub think_block: Option<String>,
    /// Items came from the fallback rule rather than the model.
    pub degraded: bool,
}

impl RewriteSet {
    /// `width` items on `query`, strategies alternating sparse, dense, ...
    pub fn fallback(query: &str, width: u32) -> Self {
        RewriteSet {
            items: (1..=width)
                .map(|rank| RewriteItem {
                    rank,
                    strategy: if rank % 2 == 1 {
                        RetrievalStrategy::Sparse
                    } else {
                        RetrievalStrategy::Dense
                    },
                    query: query.to_string(),
                })
                .collect(),
            think_block: None,
            degraded: true,
        }
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

/// Parses the tagged rewrite block. Items must carry ranks exactly `1..=width`.
pub fn parse_rewrites(text: &str, width: u32) -> Result<RewriteSet, String> {
    static THINK: OnceLock<Regex> = OnceLock::new();
    static QUERIES: OnceLock<Regex> = OnceLock::new();
    static ITEM: OnceLock<Regex> = OnceLock::new();
    static STRATEGY: OnceLock<Regex> = OnceLock::new();
    static QUERY: OnceLock<Regex> = OnceLock::new();

    let think = re(&THINK, r"(?s)<think>(.*?)</think>");
    let think_block = think.captures(text).map(|c| c[1].trim().to_string());
    let rest = match think.find(text) {
        Some(m) => &text[m.end()..],
        None => text,
    };
    let block = match re(&QUERIES, r"(?s)<queries>(.*?)(?:</queries>|$)").captures(rest) {
        Some(c) => c.get(1).map(|m| m.as_str()).unwrap_or(""),
        None => rest,
    };

    let mut items = Vec::new();
    for cap in re(&ITEM, r#"(?s)<item\s+rank\s*=\s*"?(\d+)"?\s*>(.*?)</item>"#).captures_iter(block) {
        let rank: u32 = cap[1].parse().map_err(|_| format!("bad rank {:?}", &cap[1]))?;
        let body = &cap[2];
        let strategy = re(&STRATEGY, r"(?s)<strategy>(.*?)</strategy>")
            .captures(body)
            .ok_or_else(|| format!("item {rank}: missing <strategy>"))?[1]
            .trim()
            .to_ascii_lowercase();
        let strategy = match strategy.as_str() {
            "bm25" => RetrievalStrategy::Sparse,
            "dense" => RetrievalStrategy::Dense,
            other => return Err(format!("item {rank}: unknown strategy {other:?}")),
        };
        let query = re(&QUERY, r"(?s)<query>(.*?)</query>")
            .captures(body)
            .ok_or_else(|| format!("item {rank}: missing <query>"))?[1]
            .trim()
            .to_string();
        if query.is_empty() {
            return Err(format!("item {rank}: empty query"));
        }
        items.push(RewriteItem { rank, strategy, query });
    }
    if items.len() != width as usize {
        return Err(format!("expected {width} items, found {}", items.len()));
    }
    items.sort_by_key(|i| i.rank);
    if items.iter().zip(1..=width).any(|(i, r)| i.rank != r) {
        return Err("ranks are not exactly 1..N".into());
    }
    Ok(RewriteSet {
        items,
        think_block,
        degraded: false,
    })
}

/// STOP/CONTINUE from the first standalone keyword, case-insensitive.
pub fn parse_decision(text: &str) -> Option<Signal> {
    static KW: OnceLock<Regex> = OnceLock::new();
    let m = re(&KW, r"(?i)\b(stop|continue)\b").find(text)?;
    if m.as_str().eq_ignore_ascii_case("stop") {
        Some(Signal::Stop)
    } else {
        Some(Signal::Continue)
    }
}

/// Content of the first `<answer>...</answer>` span, trimmed.
pub fn parse_selected_answer(text: &str) -> Option<String> {
    static ANS: OnceLock<Regex> = OnceLock::new();
    let c = re(&ANS, r"(?s)<answer>(.*?)</answer>").captures(text)?;
    let s = c[1].trim().to_string();
    (!s.is_empty()).then_some(s)
}

/// `Title: {title}\n{text}` blocks separated by blank lines, in rank order.
pub fn format_passages(passages: &[Passage]) -> String {
    passages
        .iter()
        .map(|p| format!("Title: {}\n{}", p.title, p.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn format_answer_blocks(candidates: &[BranchOutcome]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "Answer {}: {}\nEvaluation: {}\nNotes: {}",
                i + 1,
                c.answer.text,
                c.decision.signal,
                c.memory.note
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn format_note_list(notes: &[&str]) -> String {
    let mut out = String::new();
    for (i, n) in notes.iter().enumerate() {
        out.push_str(&format!("\n[Note {}]\n{}\n", i + 1, n));
    }
    out
}

/// Rank chosen when the selection output names no candidate: the first
/// STOP candidate, else the first candidate.
pub fn fallback_rank(candidates: &[BranchOutcome]) -> u32 {
    candidates
        .iter()
        .find(|c| c.decision.signal == Signal::Stop)
        .or_else(|| candidates.first())
        .map(|c| c.rank)
        .unwrap_or(1)
}

const REWRITE_REMINDER: &str = "Your previous output did not follow the required format. Output exactly {N} items inside <queries> </queries>, each as <item rank=\"k\"><strategy>bm25|dense</strategy><query>...</query></item> with ranks 1 to {N}, then end with the literal tag [END].

Output:";

/// Shared handles for the LLM-backed operators.
#[derive(Clone)]
pub struct Agents {
    pub backend: Arc<dyn LlmBackend>,
    pub templates: Arc<TemplateCatalog>,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub note_char_cap: usize,
    /// Record zero latency so traces are reproducible.
    pub frozen_clock: bool,
}

struct Output {
    text: String,
    raw: String,
    flags: Flags,
    cost: CostLedger,
}

impl Agents {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Agents {
            backend,
            templates: Arc::new(TemplateCatalog::default()),
            sampling: SamplingConfig::default(),
            seed: 42,
            note_char_cap: DEFAULT_NOTE_CHAR_CAP,
            frozen_clock: false,
        }
    }

    fn call(&self, request: GenerationRequest) -> Result<Output, AgentError> {
        let resp = self.backend.generate(&request)?;
        let cost = CostLedger::default().add(
            resp.prompt_tokens,
            resp.completion_tokens,
            CallKind::Llm,
            if self.frozen_clock { 0 } else { resp.latency_ms },
        );
        let (text, found) = strip_terminator(&resp.text);
        let mut flags = Flags::new();
        if !found && !resp.stop_sequence_hit {
            flags.insert(Flag::MissingTerminator);
        }
        if text.is_empty() {
            flags.insert(Flag::EmptyOutput);
        }
        if resp.estimated_usage {
            flags.insert(Flag::EstimatedTokens);
        }
        Ok(Output {
            text,
            raw: resp.text,
            flags,
            cost,
        })
    }

    fn capped(&self, note: String, flags: &mut Flags) -> (String, bool) {
        let (note, cut) = MemoryState::cap_note(note, self.note_char_cap);
        if cut {
            flags.insert(Flag::NoteTruncated);
        }
        (note, cut)
    }

    pub fn rewrite_prompt(&self, query: &Query, memory: &MemoryState, width: u32) -> Result<String, AgentError> {
        let n = width.to_string();
        Ok(self.templates.render(
            QUERY_REWRITER,
            &[
                ("N", &n),
                ("query", &query.original),
                ("current_query", &query.current),
                ("context", &memory.note),
            ],
        )?)
    }

    /// One generation call producing `width` (strategy, query) pairs, with a
    /// single format-reminder retry and a deterministic fallback.
    pub fn rewrite_query(&self, query: &Query, memory: &MemoryState, width: u32) -> Result<Called<RewriteSet>, AgentError> {
        let prompt = self.rewrite_prompt(query, memory, width)?;
        let first = self.call(self.sampling.request(prompt.clone(), self.seed))?;
        let mut flags = first.flags;
        let mut cost = first.cost;
        if let Ok(set) = parse_rewrites(&first.text, width) {
            return Ok(Called { value: set, flags, cost });
        }
        flags.insert(Flag::RepairAttempted);
        let reminder = REWRITE_REMINDER.replace("{N}", &width.to_string());
        let second = self.call(self.sampling.request(format!("{prompt}\n\n{reminder}"), self.seed))?;
        flags.extend(second.flags);
        cost = cost.merge(&second.cost);
        let value = match parse_rewrites(&second.text, width) {
            Ok(set) => set,
            Err(reason) => {
                tracing::warn!(%reason, "rewrite output unparseable; using fallback rewrites");
                flags.insert(Flag::Degraded);
                RewriteSet::fallback(&query.current, width)
            }
        };
        Ok(Called { value, flags, cost })
    }

    /// Folds newly retrieved passages into the note. `_current_query` is
    /// accepted for signature parity; the template conditions on the original query.
    pub fn mem_update(
        &self,
        query: &Query,
        _current_query: &str,
        memory: &MemoryState,
        passages: &[Passage],
    ) -> Result<Called<MemoryState>, AgentError> {
        let evidence = format_passages(passages);
        let prompt = self.templates.render(
            CONTEXT_MANAGER,
            &[("query", &query.original), ("note", &memory.note), ("new_context", &evidence)],
        )?;
        let out = self.call(self.sampling.request(prompt, self.seed))?;
        let mut flags = out.flags;
        let note = if out.text.is_empty() {
            flags.insert(Flag::Degraded);
            memory.note.clone()
        } else {
            out.text
        };
        let (note, truncated) = self.capped(note, &mut flags);
        let mut absorbed = memory.absorbed_ids.clone();
        absorbed.extend(passages.iter().map(|p| p.id.clone()));
        Ok(Called {
            value: MemoryState {
                note,
                absorbed_ids: absorbed,
                revision: memory.revision + 1,
                truncated: memory.truncated || truncated,
            },
            flags,
            cost: out.cost,
        })
    }

    pub fn generate_answer(
        &self,
        query: &Query,
        memory: &MemoryState,
        round: u32,
        rank: u32,
    ) -> Result<Called<AnswerCandidate>, AgentError> {
        let prompt = self
            .templates
            .render(ANSWER_GENERATOR, &[("note", &memory.note), ("query", &query.original)])?;
        let out = self.call(self.sampling.request(prompt, self.seed))?;
        Ok(Called {
            value: AnswerCandidate {
                text: out.text,
                branch_rank: rank,
                round,
            },
            flags: out.flags,
            cost: out.cost,
        })
    }

    pub fn evaluate_prompt(
        &self,
        query: &Query,
        current_query: &str,
        answer: &AnswerCandidate,
        memory: &MemoryState,
    ) -> Result<String, AgentError> {
        Ok(self.templates.render(
            ANSWER_EVALUATOR,
            &[
                ("query", &query.original),
                ("current_query", current_query),
                ("answer", &answer.text),
                ("note", &memory.note),
            ],
        )?)
    }

    /// STOP/CONTINUE verdict at the evaluator temperature. Output without
    /// either keyword counts as CONTINUE and is flagged.
    pub fn evaluate_answer(
        &self,
        query: &Query,
        current_query: &str,
        answer: &AnswerCandidate,
        memory: &MemoryState,
    ) -> Result<Called<Decision>, AgentError> {
        let prompt = self.evaluate_prompt(query, current_query, answer, memory)?;
        let out = self.call(self.sampling.evaluator_request(prompt, self.seed))?;
        let mut flags = out.flags;
        let signal = parse_decision(&out.text).unwrap_or_else(|| {
            flags.insert(Flag::Unparsed);
            Signal::Continue
        });
        Ok(Called {
            value: Decision { signal, raw: out.raw },
            flags,
            cost: out.cost,
        })
    }

    /// Rank of the most promising branch. A single candidate is returned
    /// without a model call.
    pub fn select_best(&self, query: &Query, candidates: &[BranchOutcome]) -> Result<Called<u32>, AgentError> {
        match candidates {
            [] => return Ok(Called::free(1)),
            [only] => return Ok(Called::free(only.rank)),
            _ => {}
        }
        let prompt = self.templates.render(
            ANSWER_SELECTION,
            &[("question", &query.original), ("answer_blocks", &format_answer_blocks(candidates))],
        )?;
        let out = self.call(self.sampling.request(prompt, self.seed))?;
        let mut flags = out.flags;
        let chosen = parse_selected_answer(&out.text).and_then(|sel| {
            candidates
                .iter()
                .find(|c| c.answer.text.trim() == sel)
                .or_else(|| {
                    let norm = normalize_answer(&sel);
                    candidates
                        .iter()
                        .find(|c| !norm.is_empty() && normalize_answer(&c.answer.text) == norm)
                })
                .map(|c| c.rank)
        });
        let rank = chosen.unwrap_or_else(|| {
            flags.insert(Flag::SelectionFallback);
            fallback_rank(candidates)
        });
        Ok(Called {
            value: rank,
            flags,
            cost: out.cost,
        })
    }

    /// Merges all branch notes into one, seeded by the selected branch.
    pub fn context_merge(
        &self,
        query: &Query,
        best: &MemoryState,
        others: &[&MemoryState],
    ) -> Result<Called<MemoryState>, AgentError> {
        let mut absorbed = best.absorbed_ids.clone();
        let mut revision = best.revision;
        let mut truncated = best.truncated;
        for o in others {
            absorbed.extend(o.absorbed_ids.iter().cloned());
            revision = revision.max(o.revision);
            truncated |= o.truncated;
        }
        if others.is_empty() {
            return Ok(Called::free(MemoryState {
                revision: best.revision + 1,
                ..best.clone()
            }));
        }
        let notes: Vec<&str> = std::iter::once(best.note.as_str())
            .chain(others.iter().map(|m| m.note.as_str()))
            .collect();
        let prompt = self.templates.render(
            CONTEXT_MERGE,
            &[("question", &query.original), ("reasoning_list", &format_note_list(&notes))],
        )?;
        let out = self.call(self.sampling.request(prompt, self.seed))?;
        let mut flags = out.flags;
        let note = if out.text.is_empty() {
            flags.insert(Flag::Degraded);
            best.note.clone()
        } else {
            out.text
        };
        let (note, cut) = self.capped(note, &mut flags);
        Ok(Called {
            value: MemoryState {
                note,
                absorbed_ids: absorbed,
                revision: revision + 1,
                truncated: truncated || cut,
            },
            flags,
            cost: out.cost,
        })
    }
}
