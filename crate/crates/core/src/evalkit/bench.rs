use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use super::metrics::{accuracy, exact_match, paragraph_recall, token_f1};
use crate::model::{rollout_to_text, DocId, Rollout, TerminatedBy};
use crate::orchestrator::{run_query, OrchestratorError, RolloutConfig, StrategyMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0} list is empty")]
    EmptyGrid(&'static str),
    #[error(transparent)]
    Config(#[from] OrchestratorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub gold_paragraph_ids: Vec<DocId>,
}

pub fn parse_dataset(text: &str) -> Result<Vec<DatasetExample>, EvalError> {
    let mut out: Vec<DatasetExample> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::Dataset {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EvalError::Dataset { line: line_no, message };
        let ex: DatasetExample = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if ex.gold_answers.is_empty() {
            return Err(bad("gold_answers is empty".into()));
        }
        if !seen.insert(ex.id.clone()) {
            return Err(bad(format!("duplicate id {:?}", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetExample>, EvalError> {
    parse_dataset(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// One per-example report row. Failed examples carry zeroed metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub recall: f64,
    /// Gold paragraph list was empty; recall is 1 and left out of the mean.
    pub recall_vacuous: bool,
    pub rounds: usize,
    pub total_tokens: u64,
    pub latency_ms: u64,
    pub terminated_by: Option<TerminatedBy>,
    pub failed: bool,
    pub prediction: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub examples: usize,
    pub failures: usize,
    pub em: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Mean of accuracy, F1 and EM.
    pub avg: f64,
    /// Mean over rows with a non-empty gold paragraph list.
    pub recall: Option<f64>,
    pub rounds: f64,
    pub total_tokens: f64,
    pub latency_ms: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[ExampleRow]) -> Self {
        let n = rows.len();
        if n == 0 {
            return Aggregates::default();
        }
        let mean = |f: &dyn Fn(&ExampleRow) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
        let em = mean(&|r| r.em);
        let f1 = mean(&|r| r.f1);
        let acc = mean(&|r| r.accuracy);
        let scored: Vec<f64> = rows.iter().filter(|r| !r.recall_vacuous).map(|r| r.recall).collect();
        Aggregates {
            examples: n,
            failures: rows.iter().filter(|r| r.failed).count(),
            em,
            f1,
            accuracy: acc,
            avg: (acc + f1 + em) / 3.0,
            recall: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
            rounds: mean(&|r| r.rounds as f64),
            total_tokens: mean(&|r| r.total_tokens as f64),
            latency_ms: mean(&|r| r.latency_ms as f64),
        }
    }
}

/// The run settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub width: u32,
    pub max_depth: u32,
    pub max_total_tokens: Option<u64>,
    pub retrieval_k: usize,
    pub strategy_mode: StrategyMode,
    pub seed: u64,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ConfigEcho {
    pub fn of(c: &RolloutConfig) -> Self {
        ConfigEcho {
            width: c.budget.width,
            max_depth: c.budget.max_depth,
            max_total_tokens: c.budget.max_total_tokens,
            retrieval_k: c.retrieval_k,
            strategy_mode: c.strategy_mode,
            seed: c.budget.seed,
            temperature: c.sampling.temperature,
            top_p: c.sampling.top_p,
            max_tokens: c.sampling.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: ConfigEcho,
    pub aggregates: Aggregates,
    pub per_example: Vec<ExampleRow>,
}

impl MetricReport {
    pub fn has_failures(&self) -> bool {
        self.aggregates.failures > 0
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Rollouts in flight at once.
    pub concurrency: usize,
    /// Where to write `report.csv`, `summary.json` and `traces/`.
    pub out_dir: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            concurrency: 4,
            out_dir: None,
        }
    }
}

pub fn score_rollout(example: &DatasetExample, rollout: &Rollout) -> ExampleRow {
    let gold: BTreeSet<DocId> = example.gold_paragraph_ids.iter().cloned().collect();
    let failed = rollout.failed();
    let pred = &rollout.final_answer.text;
    let zero_if_failed = |v: f64| if failed { 0.0 } else { v };
    ExampleRow {
        id: example.id.clone(),
        em: zero_if_failed(exact_match(pred, &example.gold_answers)),
        f1: zero_if_failed(token_f1(pred, &example.gold_answers)),
        accuracy: zero_if_failed(accuracy(pred, &example.gold_answers)),
        recall: zero_if_failed(paragraph_recall(&rollout.final_memory.absorbed_ids, &gold)),
        recall_vacuous: gold.is_empty(),
        rounds: rollout.rounds.len(),
        total_tokens: rollout.ledger.total_tokens(),
        latency_ms: rollout.ledger.wall_clock_ms,
        terminated_by: Some(rollout.terminated_by),
        failed,
        prediction: pred.clone(),
    }
}

fn failed_row(example: &DatasetExample) -> ExampleRow {
    ExampleRow {
        id: example.id.clone(),
        em: 0.0,
        f1: 0.0,
        accuracy: 0.0,
        recall: 0.0,
        recall_vacuous: example.gold_paragraph_ids.is_empty(),
        rounds: 0,
        total_tokens: 0,
        latency_ms: 0,
        terminated_by: None,
        failed: true,
        prediction: String::new(),
    }
}

/// Example ids made safe for use as file names.
pub fn trace_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    format!("{safe}.jsonl")
}

pub fn write_report_csv(rows: &[ExampleRow], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_outputs(dir: &Path, report: &MetricReport, rollouts: &[Option<Rollout>]) -> Result<(), EvalError> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;
    write_report_csv(&report.per_example, &dir.join("report.csv"))?;
    let summary = serde_json::json!({ "config": report.config, "aggregates": report.aggregates });
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(io_err(&path))?;
    for r in rollouts.iter().flatten() {
        let id = r.example_id.as_deref().unwrap_or("unnamed");
        let path = traces.join(trace_file_name(id));
        fs::write(&path, rollout_to_text(r)).map_err(io_err(&path))?;
    }
    Ok(())
}

type Slot = Mutex<Option<(ExampleRow, Option<Rollout>)>>;

/// Runs every example, scores it and optionally writes the report files.
/// Per-example failures are recorded, not raised.
pub fn run_benchmark(
    dataset: &[DatasetExample],
    config: &RolloutConfig,
    options: &BenchOptions,
) -> Result<MetricReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    config.validate()?;
    let slots: Vec<Slot> = dataset.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = options.concurrency.clamp(1, dataset.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(ex) = dataset.get(i) else { break };
                let result = match run_query(config, &ex.question) {
                    Ok(mut rollout) => {
                        rollout.example_id = Some(ex.id.clone());
                        (score_rollout(ex, &rollout), Some(rollout))
                    }
                    Err(e) => {
                        tracing::warn!(id = %ex.id, error = %e, "example failed");
                        (failed_row(ex), None)
                    }
                };
                info!(id = %ex.id, failed = result.0.failed, "example finished");
                *slots[i].lock().expect("slot") = Some(result);
            });
        }
    });
    let (rows, rollouts): (Vec<_>, Vec<_>) = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("every example ran"))
        .unzip();
    let report = MetricReport {
        config: ConfigEcho::of(config),
        aggregates: Aggregates::from_rows(&rows),
        per_example: rows,
    };
    if let Some(dir) = &options.out_dir {
        write_outputs(dir, &report, &rollouts)?;
    }
    Ok(report)
}

/// One line of the width × depth grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "W")]
    pub width: u32,
    #[serde(rename = "D")]
    pub depth: u32,
    pub acc: f64,
    pub f1: f64,
    pub em: f64,
    pub avg: f64,
    /// Mean total tokens per example.
    pub tokens: f64,
}

impl SweepRow {
    pub fn of(report: &MetricReport) -> Self {
        let a = &report.aggregates;
        SweepRow {
            width: report.config.width,
            depth: report.config.max_depth,
            acc: a.accuracy,
            f1: a.f1,
            em: a.em,
            avg: a.avg,
            tokens: a.total_tokens,
        }
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Runs the benchmark for every (width, depth) pair, widths outermost.
/// With an output directory each configuration gets `w{W}_d{D}/` and the
/// grid is written to `sweep.csv`.
pub fn run_sweep(
    dataset: &[DatasetExample],
    base: &RolloutConfig,
    widths: &[u32],
    depths: &[u32],
    options: &BenchOptions,
) -> Result<Vec<MetricReport>, EvalError> {
    if widths.is_empty() {
        return Err(EvalError::EmptyGrid("widths"));
    }
    if depths.is_empty() {
        return Err(EvalError::EmptyGrid("depths"));
    }
    let mut reports = Vec::new();
    for &w in widths {
        for &d in depths {
            let mut config = base.clone();
            config.budget.width = w;
            config.budget.max_depth = d;
            let opts = BenchOptions {
                concurrency: options.concurrency,
                out_dir: options.out_dir.as_ref().map(|o| o.join(format!("w{w}_d{d}"))),
            };
            info!(width = w, depth = d, "sweep configuration");
            reports.push(run_benchmark(dataset, &config, &opts)?);
        }
    }
    if let Some(dir) = &options.out_dir {
        let rows: Vec<SweepRow> = reports.iter().map(SweepRow::of).collect();
        write_sweep_csv(&rows, &dir.join("sweep.csv"))?;
    }
    Ok(reports)
}
