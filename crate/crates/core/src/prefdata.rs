//! Preference pairs for the rewriter and evaluator, and the weighted DPO
//! loss used to check them numerically.
//!
//! Pair files hold one JSON object per line with the fields `prompt`,
//! `chosen`, `rejected`, `weight`, `source` and `meta`. Trainers that do not
//! understand `weight` can ignore it and fall back to plain DPO.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{parse_decision, AgentError, Agents};
use crate::evalkit::{accuracy, paragraph_recall};
use crate::model::{CallKind, CostLedger, DocId, MemoryState, Query, RewriteItem, Rollout, Signal};

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("non-finite input to loss: {0}")]
    NonFinite(String),
    #[error("prompt group has inconsistent correctness labels")]
    InconsistentLabels,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Rewriter,
    Evaluator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub weight: f64,
    pub source: PairSource,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoParams {
    pub beta: f64,
    /// Weight on pairs that prefer continuing over a wrong stop.
    pub lambda: f64,
}

impl Default for DpoParams {
    fn default() -> Self {
        DpoParams { beta: 0.1, lambda: 2.0 }
    }
}

impl DpoParams {
    pub fn new(beta: f64, lambda: f64) -> Result<Self, PrefError> {
        let p = DpoParams { beta, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PrefError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(PrefError::Invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda.is_finite() && self.lambda > 1.0) {
            return Err(PrefError::Invalid(format!("lambda must be > 1, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Counts reported alongside generated pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefSummary {
    pub groups: usize,
    pub skipped_groups: usize,
    pub pairs: usize,
    pub unit_weight_pairs: usize,
    pub lambda_weight_pairs: usize,
}

impl PrefSummary {
    fn count(&mut self, pairs: &[PreferencePair]) {
        self.pairs = pairs.len();
        self.unit_weight_pairs = pairs.iter().filter(|p| p.weight == 1.0).count();
        self.lambda_weight_pairs = self.pairs - self.unit_weight_pairs;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriterSample {
    pub prompt: String,
    pub rewrites: Vec<RewriteItem>,
    /// Recall of the union of passages retrieved by all rewrites.
    pub union_recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorSample {
    pub prompt: String,
    pub decision: Signal,
    pub answer_correct: bool,
}

/// Groups by prompt, in order of first appearance.
fn group_by_prompt<T>(samples: &[T], prompt: impl Fn(&T) -> &str) -> Vec<Vec<&T>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for s in samples {
        let p = prompt(s);
        groups
            .entry(p)
            .or_insert_with(|| {
                order.push(p);
                Vec::new()
            })
            .push(s);
    }
    order.into_iter().map(|p| groups.remove(p).unwrap_or_default()).collect()
}

/// The rewrite set in the tagged output format the rewriter is asked for.
pub fn serialize_rewrite_set(items: &[RewriteItem]) -> String {
    let mut out = String::from("<queries>\n");
    for item in items {
        let strategy = match item.strategy {
            crate::model::RetrievalStrategy::Sparse => "bm25",
            crate::model::RetrievalStrategy::Dense => "dense",
        };
        out.push_str(&format!(
            "  <item rank=\"{}\"><strategy>{}</strategy>\n    <query>{}</query>\n  </item>\n",
            item.rank, strategy, item.query
        ));
    }
    out.push_str("</queries>\n[END]");
    out
}

/// Every strictly ordered pair within each prompt group; the higher union
/// recall is chosen. Ties and single-sample groups yield nothing.
pub fn gen_rewriter_prefs(samples: &[RewriterSample]) -> (Vec<PreferencePair>, PrefSummary) {
    let mut summary = PrefSummary::default();
    let mut pairs = Vec::new();
    for group in group_by_prompt(samples, |s| &s.prompt) {
        summary.groups += 1;
        if group.len() < 2 {
            summary.skipped_groups += 1;
            continue;
        }
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (group[i], group[j]);
                if a.union_recall == b.union_recall {
                    continue;
                }
                let (hi, lo) = if a.union_recall > b.union_recall { (a, b) } else { (b, a) };
                let chosen = serialize_rewrite_set(&hi.rewrites);
                let rejected = serialize_rewrite_set(&lo.rewrites);
                if chosen == rejected {
                    continue;
                }
                let mut meta = BTreeMap::new();
                meta.insert("chosen_recall".into(), Value::from(hi.union_recall));
                meta.insert("rejected_recall".into(), Value::from(lo.union_recall));
                pairs.push(PreferencePair {
                    prompt: a.prompt.clone(),
                    chosen,
                    rejected,
                    weight: 1.0,
                    source: PairSource::Rewriter,
                    meta,
                });
            }
        }
    }
    summary.count(&pairs);
    (pairs, summary)
}

/// λ when a continue is preferred over a stop, otherwise 1.
pub fn pair_weight(chosen: Signal, rejected: Signal, params: &DpoParams) -> f64 {
    if chosen == Signal::Continue && rejected == Signal::Stop {
        params.lambda
    } else {
        1.0
    }
}

/// One pair per prompt group holding both decisions: stop is preferred when
/// the answer is correct, continue (weighted λ) when it is not.
pub fn gen_evaluator_prefs(
    samples: &[EvaluatorSample],
    params: &DpoParams,
) -> Result<(Vec<PreferencePair>, PrefSummary), PrefError> {
    params.validate()?;
    let mut summary = PrefSummary::default();
    let mut pairs = Vec::new();
    for group in group_by_prompt(samples, |s| &s.prompt) {
        summary.groups += 1;
        let correct = group[0].answer_correct;
        if group.iter().any(|s| s.answer_correct != correct) {
            return Err(PrefError::InconsistentLabels);
        }
        let has = |sig: Signal| group.iter().any(|s| s.decision == sig);
        if !(has(Signal::Stop) && has(Signal::Continue)) {
            summary.skipped_groups += 1;
            continue;
        }
        let (chosen, rejected) = if correct {
            (Signal::Stop, Signal::Continue)
        } else {
            (Signal::Continue, Signal::Stop)
        };
        let mut meta = BTreeMap::new();
        meta.insert("answer_correct".into(), Value::from(correct));
        meta.insert("samples".into(), Value::from(group.len()));
        pairs.push(PreferencePair {
            prompt: group[0].prompt.clone(),
            chosen: chosen.to_string(),
            rejected: rejected.to_string(),
            weight: pair_weight(chosen, rejected, params),
            source: PairSource::Evaluator,
            meta,
        });
    }
    summary.count(&pairs);
    Ok((pairs, summary))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `weight * -ln σ(beta * (logp_chosen - logp_rejected))`.
pub fn weighted_dpo_loss(logp_chosen: f64, logp_rejected: f64, weight: f64, beta: f64) -> Result<f64, PrefError> {
    for (name, v) in [("logp_chosen", logp_chosen), ("logp_rejected", logp_rejected), ("weight", weight), ("beta", beta)] {
        if !v.is_finite() {
            return Err(PrefError::NonFinite(format!("{name}={v}")));
        }
    }
    if weight < 1.0 {
        return Err(PrefError::Invalid(format!("weight must be >= 1, got {weight}")));
    }
    if beta <= 0.0 {
        return Err(PrefError::Invalid(format!("beta must be > 0, got {beta}")));
    }
    let margin = beta * (logp_chosen - logp_rejected);
    if !margin.is_finite() {
        return Err(PrefError::NonFinite(format!("beta*delta={margin}")));
    }
    Ok(weight * softplus(-margin))
}

pub fn write_pairs<W: Write>(pairs: &[PreferencePair], mut out: W) -> std::io::Result<usize> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(pairs.len())
}

pub fn export_pairs(pairs: &[PreferencePair], path: &Path) -> Result<usize, PrefError> {
    let io = |source| PrefError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_pairs(pairs, BufWriter::new(file)).map_err(io)
}

pub fn import_pairs(path: &Path) -> Result<Vec<PreferencePair>, PrefError> {
    let io = |source| PrefError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|source| PrefError::Json { line: i + 1, source })?);
    }
    Ok(pairs)
}

/// The (query, memory) the rewriter saw at each round of a rollout.
fn rewriter_inputs(rollout: &Rollout) -> Vec<(Query, MemoryState)> {
    let original = &rollout.query.original;
    let mut query = Query::initial(original);
    let mut memory = MemoryState::empty();
    let mut out = Vec::new();
    for round in &rollout.rounds {
        query.round = round.round;
        out.push((query.clone(), memory.clone()));
        if let Some(best) = round.selected() {
            query.current = best.query.clone();
            query.branch_rank = best.rank;
        }
        memory = round.merged_memory.clone();
    }
    out
}

/// One rewriter sample per round, scored by the recall of all passages the
/// round's branches retrieved.
pub fn rewriter_samples(
    agents: &Agents,
    rollout: &Rollout,
    gold_ids: &BTreeSet<DocId>,
) -> Result<Vec<RewriterSample>, PrefError> {
    let mut out = Vec::new();
    for (round, (query, memory)) in rollout.rounds.iter().zip(rewriter_inputs(rollout)) {
        let retrieved: BTreeSet<DocId> = round
            .branches
            .iter()
            .flat_map(|b| b.passages.iter().map(|p| p.id.clone()))
            .collect();
        out.push(RewriterSample {
            prompt: agents.rewrite_prompt(&query, &memory, round.rewrites.len() as u32)?,
            rewrites: round.rewrites.clone(),
            union_recall: paragraph_recall(&retrieved, gold_ids),
        });
    }
    Ok(out)
}

/// The evaluator prompt of every branch with its recorded decision.
pub fn evaluator_samples(
    agents: &Agents,
    rollout: &Rollout,
    gold_answers: &[String],
) -> Result<Vec<EvaluatorSample>, PrefError> {
    let query = Query::initial(&rollout.query.original);
    let mut out = Vec::new();
    for round in &rollout.rounds {
        for b in &round.branches {
            out.push(EvaluatorSample {
                prompt: agents.evaluate_prompt(&query, &b.query, &b.answer, &b.memory)?,
                decision: b.decision.signal,
                answer_correct: accuracy(&b.answer.text, gold_answers) > 0.0,
            });
        }
    }
    Ok(out)
}

/// Draws `n` extra decisions for `sample`'s prompt at the generation
/// temperature, seeds `seed, seed+1, ...`. Unparseable outputs are dropped.
pub fn draw_decisions(
    agents: &Agents,
    sample: &EvaluatorSample,
    n: usize,
) -> Result<(Vec<EvaluatorSample>, CostLedger), PrefError> {
    let mut cost = CostLedger::default();
    let mut out = Vec::new();
    for i in 0..n as u64 {
        let req = agents.sampling.request(sample.prompt.clone(), agents.seed.wrapping_add(i));
        let resp = agents.backend.generate(&req).map_err(AgentError::from)?;
        cost = cost.add(resp.prompt_tokens, resp.completion_tokens, CallKind::Llm, 0);
        let (text, _) = crate::agents::strip_terminator(&resp.text);
        if let Some(decision) = parse_decision(&text) {
            out.push(EvaluatorSample {
                decision,
                ..sample.clone()
            });
        }
    }
    Ok((out, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::parse_rewrites;
    use crate::model::RetrievalStrategy;

    fn rs(prompt: &str, q: &str, recall: f64) -> RewriterSample {
        RewriterSample {
            prompt: prompt.into(),
            rewrites: vec![RewriteItem {
                rank: 1,
                strategy: RetrievalStrategy::Sparse,
                query: q.into(),
            }],
            union_recall: recall,
        }
    }

    fn es(prompt: &str, d: Signal, correct: bool) -> EvaluatorSample {
        EvaluatorSample {
            prompt: prompt.into(),
            decision: d,
            answer_correct: correct,
        }
    }

    #[test]
    fn rewriter_pairs_follow_recall_order() {
        let (p, s) = gen_rewriter_prefs(&[rs("x", "a", 0.4), rs("x", "b", 0.8)]);
        assert_eq!(p.len(), 1);
        assert!(p[0].chosen.contains("<query>b</query>"));
        assert_eq!(p[0].weight, 1.0);
        assert_eq!(s.groups, 1);
        let (p, _) = gen_rewriter_prefs(&[rs("x", "a", 0.5), rs("x", "b", 0.5)]);
        assert!(p.is_empty());
        let (p, _) = gen_rewriter_prefs(&[rs("x", "a", 1.0), rs("x", "b", 0.6), rs("x", "c", 0.2)]);
        assert_eq!(p.len(), 3);
        let (p, s) = gen_rewriter_prefs(&[rs("x", "a", 1.0), rs("y", "b", 0.6)]);
        assert!(p.is_empty());
        assert_eq!(s.skipped_groups, 2);
    }

    #[test]
    fn serialized_rewrites_parse_back() {
        let items = vec![
            RewriteItem {
                rank: 1,
                strategy: RetrievalStrategy::Sparse,
                query: "EQT founder".into(),
            },
            RewriteItem {
                rank: 2,
                strategy: RetrievalStrategy::Dense,
                query: "who started it".into(),
            },
        ];
        assert_eq!(parse_rewrites(&serialize_rewrite_set(&items), 2).unwrap().items, items);
    }

    #[test]
    fn evaluator_pairs() {
        let params = DpoParams::default();
        let (p, _) = gen_evaluator_prefs(&[es("x", Signal::Stop, true), es("x", Signal::Continue, true)], &params).unwrap();
        assert_eq!((p[0].chosen.as_str(), p[0].weight), ("STOP", 1.0));
        let (p, _) = gen_evaluator_prefs(&[es("x", Signal::Stop, false), es("x", Signal::Continue, false)], &params).unwrap();
        assert_eq!((p[0].chosen.as_str(), p[0].rejected.as_str(), p[0].weight), ("CONTINUE", "STOP", 2.0));
        let (p, s) = gen_evaluator_prefs(&[es("x", Signal::Stop, false), es("x", Signal::Stop, false)], &params).unwrap();
        assert!(p.is_empty());
        assert_eq!(s.skipped_groups, 1);
        assert!(matches!(
            gen_evaluator_prefs(&[es("x", Signal::Stop, false), es("x", Signal::Continue, true)], &params),
            Err(PrefError::InconsistentLabels)
        ));
    }

    #[test]
    fn weights() {
        let p = DpoParams::default();
        assert_eq!(pair_weight(Signal::Continue, Signal::Stop, &p), 2.0);
        assert_eq!(pair_weight(Signal::Stop, Signal::Continue, &p), 1.0);
        assert_eq!(pair_weight(Signal::Continue, Signal::Continue, &p), 1.0);
        assert!(DpoParams::new(0.1, 1.0).is_err());
    }

    #[test]
    fn loss_values() {
        let l = weighted_dpo_loss(0.0, 0.0, 1.0, 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = weighted_dpo_loss(-1.0, -11.0, 1.0, 0.1).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(weighted_dpo_loss(f64::NAN, 0.0, 1.0, 0.1).is_err());
        assert!(weighted_dpo_loss(0.0, 0.0, 0.5, 0.1).is_err());
        // far tails stay finite
        assert!(weighted_dpo_loss(1e6, -1e6, 1.0, 1.0).unwrap() >= 0.0);
        assert!((weighted_dpo_loss(-1e6, 1e6, 1.0, 1.0).unwrap() - 2e6).abs() < 1e-6);
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let (pairs, _) = gen_rewriter_prefs(&[rs("x", "a", 1.0), rs("x", "b", 0.6), rs("x", "c", 0.2)]);
        assert_eq!(export_pairs(&pairs, &path).unwrap(), 3);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
        assert_eq!(import_pairs(&path).unwrap(), pairs);
        assert_eq!(export_pairs(&[], &path).unwrap(), 0);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
    }
}
