//! The round loop: rewrite the query into W branches, run the branches
//! concurrently, pick the best branch, merge all branch notes, and stop on
//! a STOP decision or when the budget runs out.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::agents::{AgentError, Agents, Retriever, TemplateCatalog, DEFAULT_RETRIEVAL_K};
use crate::llm::{LlmBackend, SamplingConfig};
use crate::model::{
    AnswerCandidate, BranchOutcome, BudgetConfig, CallKind, CostLedger, Decision, Flag, Flags,
    MemoryState, ModelError, Query, RetrievalStrategy, RewriteItem, RoundTrace, Rollout, Signal, TerminatedBy,
    DEFAULT_NOTE_CHAR_CAP,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    /// Use the strategy chosen by the rewriter for each item.
    #[default]
    Agentic,
    SparseOnly,
    DenseOnly,
}

impl std::str::FromStr for StrategyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "agentic" => Ok(StrategyMode::Agentic),
            "sparse_only" | "sparse" => Ok(StrategyMode::SparseOnly),
            "dense_only" | "dense" => Ok(StrategyMode::DenseOnly),
            other => Err(format!("unknown strategy mode {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Budget(#[from] ModelError),
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("question is empty")]
    EmptyQuestion,
}

#[derive(Clone)]
pub struct RolloutConfig {
    pub budget: BudgetConfig,
    pub retrieval_k: usize,
    pub backend: Arc<dyn LlmBackend>,
    pub retriever: Retriever,
    pub templates: Arc<TemplateCatalog>,
    pub strategy_mode: StrategyMode,
    pub sampling: SamplingConfig,
    pub note_char_cap: usize,
    /// Record zero elapsed time for every call.
    pub frozen_clock: bool,
}

impl RolloutConfig {
    pub fn new(backend: Arc<dyn LlmBackend>, retriever: Retriever) -> Self {
        RolloutConfig {
            budget: BudgetConfig::default(),
            retrieval_k: DEFAULT_RETRIEVAL_K,
            backend,
            retriever,
            templates: Arc::new(TemplateCatalog::default()),
            strategy_mode: StrategyMode::Agentic,
            sampling: SamplingConfig::default(),
            note_char_cap: DEFAULT_NOTE_CHAR_CAP,
            frozen_clock: false,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        self.budget.validate()?;
        if self.retrieval_k < 1 {
            return Err(OrchestratorError::Config("retrieval_k must be >= 1".into()));
        }
        let ok = match self.strategy_mode {
            StrategyMode::Agentic => {
                self.retriever.has(RetrievalStrategy::Sparse) || self.retriever.has(RetrievalStrategy::Dense)
            }
            StrategyMode::SparseOnly => self.retriever.has(RetrievalStrategy::Sparse),
            StrategyMode::DenseOnly => self.retriever.has(RetrievalStrategy::Dense),
        };
        if !ok {
            return Err(OrchestratorError::Config(format!(
                "no index available for strategy mode {:?}",
                self.strategy_mode
            )));
        }
        Ok(())
    }

    /// Branch count for a round. Constant today; kept as the single place a
    /// round-dependent width would go.
    pub fn width_for_round(&self, _round: u32) -> u32 {
        self.budget.width
    }

    pub fn agents(&self) -> Agents {
        Agents {
            backend: self.backend.clone(),
            templates: self.templates.clone(),
            sampling: self.sampling,
            seed: self.budget.seed,
            note_char_cap: self.note_char_cap,
            frozen_clock: self.frozen_clock,
        }
    }

    fn effective_strategy(&self, chosen: RetrievalStrategy) -> RetrievalStrategy {
        match self.strategy_mode {
            StrategyMode::Agentic => chosen,
            StrategyMode::SparseOnly => RetrievalStrategy::Sparse,
            StrategyMode::DenseOnly => RetrievalStrategy::Dense,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetCheck {
    Proceed,
    HaltDepth,
    HaltTokens,
}

/// Whether round `next_round` may start. Depth is checked first; the token
/// cap is inclusive.
pub fn check_budget(ledger: &CostLedger, budget: &BudgetConfig, next_round: u32) -> BudgetCheck {
    if next_round > budget.max_depth {
        return BudgetCheck::HaltDepth;
    }
    match budget.max_total_tokens {
        Some(cap) if ledger.total_tokens() >= cap => BudgetCheck::HaltTokens,
        _ => BudgetCheck::Proceed,
    }
}

fn is_fatal(e: &AgentError) -> bool {
    !matches!(e, AgentError::Llm(_))
}

/// retrieve → mem_update → generate_answer → evaluate_answer for one branch.
/// `q0.round` is the round number.
///
/// Backend errors inside the branch degrade the outcome instead of failing
/// it; template errors are returned.
pub fn execute_branch(
    config: &RolloutConfig,
    agents: &Agents,
    q0: &Query,
    item: &RewriteItem,
    parent_memory: &MemoryState,
) -> Result<BranchOutcome, AgentError> {
    let (round, rank, rewritten_query) = (q0.round, item.rank, item.query.as_str());
    let strategy = config.effective_strategy(item.strategy);
    let mut flags = Flags::new();
    let mut cost = CostLedger::default();
    let query = Query {
        original: q0.original.clone(),
        current: rewritten_query.to_string(),
        round,
        branch_rank: rank,
    };

    let started = Instant::now();
    let retrieved = config.retriever.retrieve(strategy, rewritten_query, config.retrieval_k);
    let elapsed = if config.frozen_clock { 0 } else { started.elapsed().as_millis() as u64 };
    cost = cost.add(0, 0, CallKind::Retrieval, elapsed);
    let passages = match retrieved {
        Ok((p, f)) => {
            flags.extend(f);
            p
        }
        Err(e) => {
            warn!(round, rank, error = %e, "retrieval failed; continuing without passages");
            flags.insert(Flag::RetrievalFailed);
            flags.insert(Flag::Degraded);
            Vec::new()
        }
    };

    let memory = match agents.mem_update(&query, rewritten_query, parent_memory, &passages) {
        Ok(c) => {
            flags.extend(c.flags);
            cost = cost.merge(&c.cost);
            c.value
        }
        Err(e) if !is_fatal(&e) => {
            warn!(round, rank, error = %e, "memory update failed; keeping parent note");
            flags.insert(Flag::Degraded);
            let mut m = parent_memory.clone();
            m.absorbed_ids.extend(passages.iter().map(|p| p.id.clone()));
            m.revision += 1;
            m
        }
        Err(e) => return Err(e),
    };

    let generated = match agents.generate_answer(&query, &memory, round, rank) {
        Ok(c) => {
            flags.extend(c.flags);
            cost = cost.merge(&c.cost);
            Some(c.value)
        }
        Err(e) if !is_fatal(&e) => {
            warn!(round, rank, error = %e, "answer generation failed");
            flags.insert(Flag::GenerationFailed);
            flags.insert(Flag::Degraded);
            None
        }
        Err(e) => return Err(e),
    };

    let (answer, decision) = match generated {
        None => (
            AnswerCandidate {
                text: String::new(),
                branch_rank: rank,
                round,
            },
            Decision {
                signal: Signal::Continue,
                raw: String::new(),
            },
        ),
        Some(answer) => match agents.evaluate_answer(&query, rewritten_query, &answer, &memory) {
            Ok(c) => {
                flags.extend(c.flags);
                cost = cost.merge(&c.cost);
                (answer, c.value)
            }
            Err(e) if !is_fatal(&e) => {
                warn!(round, rank, error = %e, "evaluation failed; treating as continue");
                flags.insert(Flag::GenerationFailed);
                flags.insert(Flag::Degraded);
                (
                    answer,
                    Decision {
                        signal: Signal::Continue,
                        raw: String::new(),
                    },
                )
            }
            Err(e) => return Err(e),
        },
    };

    Ok(BranchOutcome {
        rank,
        strategy,
        query: rewritten_query.to_string(),
        memory,
        answer,
        decision,
        passages,
        cost,
        flags,
    })
}

fn run_round(
    config: &RolloutConfig,
    agents: &Agents,
    query: &Query,
    memory: &MemoryState,
    round: u32,
) -> Result<RoundTrace, AgentError> {
    let width = config.width_for_round(round);
    let rewrites = agents.rewrite_query(query, memory, width)?;
    let mut orchestration_cost = rewrites.cost;
    let mut flags = rewrites.flags;

    let results: Vec<Result<BranchOutcome, AgentError>> = std::thread::scope(|s| {
        let handles: Vec<_> = rewrites
            .value
            .items
            .iter()
            .map(|item| {
                s.spawn(move || {
                    execute_branch(config, agents, query, item, memory)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("branch thread panicked"))
            .collect()
    });
    let branches = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let selected = agents.select_best(query, &branches)?;
    orchestration_cost = orchestration_cost.merge(&selected.cost);
    flags.extend(selected.flags);
    let selected_rank = selected.value;

    let best = branches
        .iter()
        .find(|b| b.rank == selected_rank)
        .expect("selected rank is a branch rank");
    let others: Vec<&MemoryState> = branches
        .iter()
        .filter(|b| b.rank != selected_rank)
        .map(|b| &b.memory)
        .collect();
    let merged = agents.context_merge(query, &best.memory, &others)?;
    orchestration_cost = orchestration_cost.merge(&merged.cost);
    flags.extend(merged.flags);

    Ok(RoundTrace {
        round,
        rewrites: rewrites.value.items,
        branches,
        selected_rank,
        merged_memory: merged.value,
        orchestration_cost,
        flags,
    })
}

/// Runs the full loop for one question. Backend failures yield a rollout
/// with `terminated_by = Failed` holding every completed round.
pub fn run_query(config: &RolloutConfig, question: &str) -> Result<Rollout, OrchestratorError> {
    config.validate()?;
    if question.trim().is_empty() {
        return Err(OrchestratorError::EmptyQuestion);
    }
    let agents = config.agents();
    let mut query = Query::initial(question);
    let mut memory = MemoryState::empty();
    let mut ledger = CostLedger::default();
    let mut rounds: Vec<RoundTrace> = Vec::new();
    let mut final_answer = AnswerCandidate {
        text: String::new(),
        branch_rank: 0,
        round: 0,
    };
    let mut error = None;
    let mut t = 1;

    let terminated_by = loop {
        match check_budget(&ledger, &config.budget, t) {
            BudgetCheck::HaltDepth => break TerminatedBy::DepthCap,
            BudgetCheck::HaltTokens => break TerminatedBy::TokenCap,
            BudgetCheck::Proceed => {}
        }
        query.round = t;
        info!(round = t, tokens = ledger.total_tokens(), "round started");
        let trace = match run_round(config, &agents, &query, &memory, t) {
            Ok(trace) => trace,
            Err(e) => {
                warn!(round = t, error = %e, "rollout failed");
                error = Some(e.to_string());
                break TerminatedBy::Failed;
            }
        };
        ledger = ledger.merge(&trace.total_cost());
        let best = trace.selected().expect("selected branch present");
        final_answer = best.answer.clone();
        let stop = best.decision.signal == Signal::Stop;
        query.current = best.query.clone();
        query.branch_rank = best.rank;
        memory = trace.merged_memory.clone();
        info!(
            round = t,
            tokens = ledger.total_tokens(),
            selected = trace.selected_rank,
            stop,
            "round finished"
        );
        rounds.push(trace);
        if stop {
            break TerminatedBy::StopSignal;
        }
        t += 1;
    };

    Ok(Rollout {
        example_id: None,
        query,
        rounds,
        final_answer,
        final_memory: memory,
        ledger,
        terminated_by,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_bm25_index, Analyzer, Bm25Params, CorpusDocument};
    use crate::llm::{MockBackend, MockRule};
    use crate::model::DocId;

    fn retriever() -> Retriever {
        let docs: Vec<CorpusDocument> = ["alpha beta", "beta gamma", "gamma delta"]
            .iter()
            .enumerate()
            .map(|(i, t)| CorpusDocument {
                id: DocId(format!("d{}", i + 1)),
                title: format!("T{}", i + 1),
                paragraph_text: t.to_string(),
                is_abstract: false,
                url: None,
            })
            .collect();
        Retriever::sparse(Arc::new(
            build_bm25_index(&docs, Bm25Params::default(), Analyzer::default()).unwrap(),
        ))
    }

    fn rules(decision: &str) -> Vec<MockRule> {
        vec![
            MockRule::substring(
                "rewritten queries",
                "<queries><item rank=\"1\"><strategy>bm25</strategy><query>alpha</query></item>\
                 <item rank=\"2\"><strategy>dense</strategy><query>gamma</query></item></queries>[END]",
            )
            .with_tokens(10, 5),
            MockRule::substring("Updated note:", "a note [END]").with_tokens(4, 2),
            MockRule::substring("Answer:", "Paris [END]").with_tokens(3, 1),
            MockRule::substring("Decision:", &format!("{decision} [END]")).with_tokens(2, 1),
            MockRule::substring("Final answer:", "<answer>Paris</answer> [END]").with_tokens(6, 2),
            MockRule::substring("Your response:", "merged [END]").with_tokens(5, 3),
        ]
    }

    fn config(decision: &str, depth: u32) -> RolloutConfig {
        let mut c = RolloutConfig::new(Arc::new(MockBackend::new(rules(decision)).unwrap()), retriever());
        c.budget.max_depth = depth;
        c.frozen_clock = true;
        c
    }

    #[test]
    fn budget_checks() {
        let b = BudgetConfig::default();
        assert_eq!(check_budget(&CostLedger::default(), &b, 9), BudgetCheck::HaltDepth);
        assert_eq!(check_budget(&CostLedger::default(), &b, 8), BudgetCheck::Proceed);
        let capped = BudgetConfig {
            max_total_tokens: Some(10_000),
            ..b
        };
        let spent = CostLedger {
            prompt_tokens: 9_000,
            completion_tokens: 1_000,
            ..Default::default()
        };
        assert_eq!(check_budget(&spent, &capped, 2), BudgetCheck::HaltTokens);
        assert_eq!(check_budget(&spent, &b, 2), BudgetCheck::Proceed);
    }

    #[test]
    fn stop_ends_after_one_round() {
        let r = run_query(&config("STOP", 8), "Where is it?").unwrap();
        assert_eq!(r.rounds.len(), 1);
        assert_eq!(r.terminated_by, TerminatedBy::StopSignal);
        assert_eq!(r.final_answer.text, "Paris");
        r.check_invariants(&BudgetConfig::default()).unwrap();
    }

    #[test]
    fn continue_runs_to_depth_cap() {
        let c = config("CONTINUE", 3);
        let r = run_query(&c, "Where is it?").unwrap();
        assert_eq!(r.rounds.len(), 3);
        assert_eq!(r.terminated_by, TerminatedBy::DepthCap);
        // per round: rewrite 15 + 2 branches x (6 + 4 + 3) + select 8 + merge 8
        assert_eq!(r.ledger.total_tokens(), 3 * (15 + 2 * 13 + 8 + 8));
        assert_eq!(r.ledger.llm_calls, 3 * (1 + 2 * 3 + 2));
        assert_eq!(r.ledger.retrieval_calls, 6);
        r.check_invariants(&c.budget).unwrap();
    }

    #[test]
    fn token_cap_halts_between_rounds() {
        let mut c = config("CONTINUE", 8);
        c.budget.max_total_tokens = Some(100);
        let r = run_query(&c, "q").unwrap();
        assert_eq!(r.rounds.len(), 2);
        assert_eq!(r.terminated_by, TerminatedBy::TokenCap);
    }

    struct FailingOn(MockBackend, &'static str);

    impl LlmBackend for FailingOn {
        fn generate(&self, r: &crate::llm::GenerationRequest) -> Result<crate::llm::GenerationResponse, crate::llm::LlmError> {
            if r.prompt.contains(self.1) {
                return Err(crate::llm::LlmError::Protocol("backend down".into()));
            }
            self.0.generate(r)
        }
    }

    #[test]
    fn backend_failure_keeps_partial_trace() {
        let mut c = config("CONTINUE", 8);
        // the second round's rewrite prompt carries the merged note
        c.backend = Arc::new(FailingOn(MockBackend::new(rules("CONTINUE")).unwrap(), "Context: merged"));
        let r = run_query(&c, "q").unwrap();
        assert!(r.failed());
        assert_eq!(r.rounds.len(), 1);
        assert!(r.error.as_deref().unwrap().contains("backend down"));
        assert_eq!(r.ledger, r.rounds[0].total_cost());
        r.check_invariants(&c.budget).unwrap();
    }

    #[test]
    fn branch_degrades_on_retrieval_and_generation_errors() {
        let mut c = config("STOP", 8);
        c.retriever = Retriever::default();
        let agents = c.agents();
        let mut rs = rules("STOP");
        rs.retain(|r| !matches!(&r.matcher, crate::llm::Matcher::Substring(s) if s == "Answer:"));
        c.backend = Arc::new(MockBackend::new(rs).unwrap());
        let agents2 = c.agents();
        let q = Query::initial("q");
        let item = RewriteItem {
            rank: 1,
            strategy: RetrievalStrategy::Sparse,
            query: "alpha".into(),
        };
        let out = execute_branch(&c, &agents, &q, &item, &MemoryState::empty()).unwrap();
        assert!(out.flags.contains(&Flag::RetrievalFailed));
        assert!(out.passages.is_empty());
        assert!(out.memory.absorbed_ids.is_empty());
        let out = execute_branch(&c, &agents2, &q, &item, &MemoryState::empty()).unwrap();
        assert!(out.flags.contains(&Flag::GenerationFailed));
        assert_eq!(out.answer.text, "");
        assert_eq!(out.decision.signal, Signal::Continue);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = config("STOP", 8);
        assert!(matches!(run_query(&c, "  "), Err(OrchestratorError::EmptyQuestion)));
        c.strategy_mode = StrategyMode::DenseOnly;
        assert!(matches!(run_query(&c, "q"), Err(OrchestratorError::Config(_))));
        c.strategy_mode = StrategyMode::Agentic;
        c.budget.max_depth = 0;
        assert!(matches!(run_query(&c, "q"), Err(OrchestratorError::Budget(_))));
    }
}
