//! Shared domain vocabulary: queries, passages, memory, decisions, budgets,
//! the cost ledger and the rollout trace format.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default character budget for a memory note.
pub const DEFAULT_NOTE_CHAR_CAP: usize = 8000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("trace line {line}: {source}")]
    TraceJson {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// Opaque passage / document identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub String);

impl DocId {
    pub fn new(id: impl Into<String>) -> Self {
        DocId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DocId {
    fn from(s: &str) -> Self {
        DocId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub original: String,
    pub current: String,
    pub round: u32,
    pub branch_rank: u32,
}

impl Query {
    /// The query as it stands before the first round.
    pub fn initial(question: &str) -> Self {
        Query {
            original: question.to_string(),
            current: question.to_string(),
            round: 1,
            branch_rank: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStrategy {
    Sparse,
    Dense,
}

impl fmt::Display for RetrievalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrievalStrategy::Sparse => f.write_str("sparse"),
            RetrievalStrategy::Dense => f.write_str("dense"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: DocId,
    pub title: String,
    pub text: String,
    /// 1-based position in the result list it came from.
    pub source_rank: u32,
    pub score: f64,
}

/// The evolving note plus the ids of every passage it has absorbed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryState {
    pub note: String,
    pub absorbed_ids: BTreeSet<DocId>,
    pub revision: u32,
    /// Set when the note overflowed its character cap and the oldest content was dropped.
    #[serde(default)]
    pub truncated: bool,
}

impl MemoryState {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Keeps at most `cap` characters of `note`, dropping from the front.
    /// Returns the (possibly shortened) note and whether anything was dropped.
    pub fn cap_note(note: String, cap: usize) -> (String, bool) {
        let count = note.chars().count();
        if count <= cap {
            return (note, false);
        }
        let skip = count - cap;
        let start = note
            .char_indices()
            .nth(skip)
            .map(|(i, _)| i)
            .unwrap_or(note.len());
        (note[start..].to_string(), true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub text: String,
    pub branch_rank: u32,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Stop,
    Continue,
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signal::Stop => f.write_str("STOP"),
            Signal::Continue => f.write_str("CONTINUE"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub signal: Signal,
    /// Verbatim evaluator output.
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub width: u32,
    pub max_depth: u32,
    /// Total-token cap (prompt + completion), checked between rounds.
    pub max_total_tokens: Option<u64>,
    pub seed: u64,
}

impl BudgetConfig {
    pub fn new(
        width: u32,
        max_depth: u32,
        max_total_tokens: Option<u64>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let budget = BudgetConfig {
            width,
            max_depth,
            max_total_tokens,
            seed,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width < 1 {
            return Err(ModelError::InvalidBudget("width must be >= 1".into()));
        }
        if self.max_depth < 1 {
            return Err(ModelError::InvalidBudget("max_depth must be >= 1".into()));
        }
        if self.max_total_tokens == Some(0) {
            return Err(ModelError::InvalidBudget(
                "max_total_tokens must be > 0 when set".into(),
            ));
        }
        Ok(())
    }
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            width: 2,
            max_depth: 8,
            max_total_tokens: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Llm,
    Retrieval,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub llm_calls: u64,
    pub retrieval_calls: u64,
    pub wall_clock_ms: u64,
    /// Some counter hit `u64::MAX`.
    #[serde(default)]
    pub saturated: bool,
}

fn sat_add(a: u64, b: u64, flag: &mut bool) -> u64 {
    match a.checked_add(b) {
        Some(v) => v,
        None => {
            *flag = true;
            u64::MAX
        }
    }
}

impl CostLedger {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens.saturating_add(self.completion_tokens)
    }

    /// Records one call.
    pub fn add(
        &self,
        prompt_tokens: u64,
        completion_tokens: u64,
        kind: CallKind,
        elapsed_ms: u64,
    ) -> CostLedger {
        let mut s = self.saturated;
        let mut out = CostLedger {
            prompt_tokens: sat_add(self.prompt_tokens, prompt_tokens, &mut s),
            completion_tokens: sat_add(self.completion_tokens, completion_tokens, &mut s),
            llm_calls: self.llm_calls,
            retrieval_calls: self.retrieval_calls,
            wall_clock_ms: sat_add(self.wall_clock_ms, elapsed_ms, &mut s),
            saturated: false,
        };
        match kind {
            CallKind::Llm => out.llm_calls = sat_add(out.llm_calls, 1, &mut s),
            CallKind::Retrieval => out.retrieval_calls = sat_add(out.retrieval_calls, 1, &mut s),
        }
        out.saturated = s;
        out
    }

    /// Sums two ledgers counter by counter.
    pub fn merge(&self, other: &CostLedger) -> CostLedger {
        let mut s = self.saturated || other.saturated;
        CostLedger {
            prompt_tokens: sat_add(self.prompt_tokens, other.prompt_tokens, &mut s),
            completion_tokens: sat_add(self.completion_tokens, other.completion_tokens, &mut s),
            llm_calls: sat_add(self.llm_calls, other.llm_calls, &mut s),
            retrieval_calls: sat_add(self.retrieval_calls, other.retrieval_calls, &mut s),
            wall_clock_ms: sat_add(self.wall_clock_ms, other.wall_clock_ms, &mut s),
            saturated: s,
        }
    }
}

impl std::iter::Sum for CostLedger {
    fn sum<I: Iterator<Item = CostLedger>>(iter: I) -> Self {
        iter.fold(CostLedger::default(), |acc, l| acc.merge(&l))
    }
}

/// Annotations attached to agent calls, branches and rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Output carried no `[END]` tag.
    MissingTerminator,
    /// Output was empty after stripping.
    EmptyOutput,
    /// A fallback path produced the value.
    Degraded,
    /// Evaluator output had neither STOP nor CONTINUE.
    Unparsed,
    /// Rewriter output needed the format-reminder reprompt.
    RepairAttempted,
    /// Selection output did not name any candidate answer.
    SelectionFallback,
    /// Memory note exceeded its cap.
    NoteTruncated,
    RetrievalFailed,
    /// Requested index unavailable; the other one was used.
    StrategyFallback,
    GenerationFailed,
    /// Token counts came from the local estimator, not the service.
    EstimatedTokens,
    LedgerSaturated,
}

pub type Flags = BTreeSet<Flag>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteItem {
    pub rank: u32,
    pub strategy: RetrievalStrategy,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOutcome {
    pub rank: u32,
    pub strategy: RetrievalStrategy,
    pub query: String,
    pub memory: MemoryState,
    pub answer: AnswerCandidate,
    pub decision: Decision,
    pub passages: Vec<Passage>,
    pub cost: CostLedger,
    #[serde(default)]
    pub flags: Flags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub rewrites: Vec<RewriteItem>,
    pub branches: Vec<BranchOutcome>,
    pub selected_rank: u32,
    pub merged_memory: MemoryState,
    /// Cost of the rewrite, selection and merge calls of this round.
    pub orchestration_cost: CostLedger,
    #[serde(default)]
    pub flags: Flags,
}

impl RoundTrace {
    pub fn selected(&self) -> Option<&BranchOutcome> {
        self.branches.iter().find(|b| b.rank == self.selected_rank)
    }

    /// Orchestration cost plus every branch sub-ledger.
    pub fn total_cost(&self) -> CostLedger {
        self.branches
            .iter()
            .map(|b| b.cost)
            .fold(self.orchestration_cost, |acc, c| acc.merge(&c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    StopSignal,
    DepthCap,
    TokenCap,
    /// A backend error aborted the rollout; the trace holds the completed rounds.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub example_id: Option<String>,
    pub query: Query,
    pub rounds: Vec<RoundTrace>,
    pub final_answer: AnswerCandidate,
    pub final_memory: MemoryState,
    pub ledger: CostLedger,
    pub terminated_by: TerminatedBy,
    pub error: Option<String>,
}

impl Rollout {
    pub fn failed(&self) -> bool {
        self.terminated_by == TerminatedBy::Failed
    }

    /// Checks the structural invariants of a finished rollout.
    pub fn check_invariants(&self, budget: &BudgetConfig) -> Result<(), String> {
        if self.rounds.len() > budget.max_depth as usize {
            return Err(format!(
                "{} rounds exceed max_depth {}",
                self.rounds.len(),
                budget.max_depth
            ));
        }
        if !self.failed() && self.rounds.is_empty() {
            return Err("completed rollout with no rounds".into());
        }
        let last_stop = self
            .rounds
            .last()
            .and_then(|r| r.selected())
            .map(|b| b.decision.signal == Signal::Stop)
            .unwrap_or(false);
        if (self.terminated_by == TerminatedBy::StopSignal) != last_stop && !self.failed() {
            return Err(format!(
                "terminated_by {:?} inconsistent with last selected decision",
                self.terminated_by
            ));
        }
        let sum: CostLedger = self.rounds.iter().map(|r| r.total_cost()).sum();
        if sum != self.ledger {
            return Err("ledger differs from the sum of recorded calls".into());
        }
        for r in &self.rounds {
            if r.selected().is_none() {
                return Err(format!("round {}: selected rank missing", r.round));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RolloutSummary {
    example_id: Option<String>,
    query: Query,
    round_count: usize,
    final_answer: AnswerCandidate,
    final_memory: MemoryState,
    ledger: CostLedger,
    terminated_by: TerminatedBy,
    error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceRecord {
    Round(RoundTrace),
    Summary(RolloutSummary),
}

/// One JSON object per round followed by one summary object.
pub fn serialize_rollout(rollout: &Rollout) -> Vec<String> {
    let mut lines: Vec<String> = rollout
        .rounds
        .iter()
        .map(|r| {
            serde_json::to_string(&TraceRecord::Round(r.clone())).expect("trace serializes")
        })
        .collect();
    let summary = TraceRecord::Summary(RolloutSummary {
        example_id: rollout.example_id.clone(),
        query: rollout.query.clone(),
        round_count: rollout.rounds.len(),
        final_answer: rollout.final_answer.clone(),
        final_memory: rollout.final_memory.clone(),
        ledger: rollout.ledger,
        terminated_by: rollout.terminated_by,
        error: rollout.error.clone(),
    });
    lines.push(serde_json::to_string(&summary).expect("trace serializes"));
    lines
}

/// Renders a rollout as the text of a trace file.
pub fn rollout_to_text(rollout: &Rollout) -> String {
    let mut out = String::new();
    for line in serialize_rollout(rollout) {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn parse_rollout<S: AsRef<str>>(lines: &[S]) -> Result<Rollout, ModelError> {
    let mut rounds = Vec::new();
    let mut summary = None;
    for (i, line) in lines.iter().enumerate() {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(ModelError::MalformedTrace(format!(
                "line {}: record after summary",
                i + 1
            )));
        }
        let rec: TraceRecord = serde_json::from_str(line)
            .map_err(|source| ModelError::TraceJson { line: i + 1, source })?;
        match rec {
            TraceRecord::Round(r) => rounds.push(r),
            TraceRecord::Summary(s) => summary = Some(s),
        }
    }
    let s = summary.ok_or_else(|| ModelError::MalformedTrace("no summary record".into()))?;
    if s.round_count != rounds.len() {
        return Err(ModelError::MalformedTrace(format!(
            "summary declares {} rounds, found {}",
            s.round_count,
            rounds.len()
        )));
    }
    Ok(Rollout {
        example_id: s.example_id,
        query: s.query,
        rounds,
        final_answer: s.final_answer,
        final_memory: s.final_memory,
        ledger: s.ledger,
        terminated_by: s.terminated_by,
        error: s.error,
    })
}

pub fn parse_rollout_text(text: &str) -> Result<Rollout, ModelError> {
    let lines: Vec<&str> = text.lines().collect();
    parse_rollout(&lines)
}
