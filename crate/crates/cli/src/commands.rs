use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use dwrag::agents::Agents;
use dwrag::corpus::{build_bm25_index, ingest_corpus, Analyzer, Bm25Params, CorpusFormat};
use dwrag::dense::{build_embedding_store, HttpEmbedder};
use dwrag::evalkit::{
    load_dataset, read_sweep_csv, render_f1_tokens_svg, run_benchmark, run_sweep, Aggregates, BenchOptions,
    DatasetExample,
};
use dwrag::llm::{GenerationRequest, GenerationResponse, LlmBackend, LlmError};
use dwrag::model::{parse_rollout_text, rollout_to_text, DocId, Rollout};
use dwrag::orchestrator::{run_query, OrchestratorError};
use dwrag::prefdata::{
    draw_decisions, evaluator_samples, export_pairs, gen_evaluator_prefs, gen_rewriter_prefs, rewriter_samples,
    DpoParams,
};
use serde_json::json;
use tracing::{info, warn};

use crate::config::{BackendKind, Settings, BM25_FILE, DENSE_FILE, DOCS_FILE};
use crate::manifest::RunManifest;
use crate::{PrefMode, Usage};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const PLOT_FILE: &str = "f1_tokens.svg";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn with_mock_rules(m: RunManifest, s: &Settings) -> Result<RunManifest> {
    match (&s.mock_rules, s.backend_kind()) {
        (Some(p), BackendKind::Mock) => m.input("mock_rules", p),
        _ => Ok(m),
    }
}

pub fn index(
    corpus: &Path,
    format: Option<CorpusFormat>,
    out: &Path,
    dense: bool,
    stopwords: bool,
    settings: Settings,
) -> Result<bool> {
    let format = format
        .or_else(|| CorpusFormat::from_path(corpus))
        .ok_or_else(|| Usage(format!("cannot tell the format of {}; pass --format jsonl|tsv", corpus.display())))?;
    let embedding = if dense {
        let model = settings
            .embed_model
            .as_deref()
            .ok_or_else(|| Usage("--dense needs --embed-model (or DWRAG_EMBED_MODEL)".into()))?;
        let dim = settings.embed_dim.ok_or_else(|| Usage("--dense needs --embed-dim".into()))?;
        Some(
            settings
                .embedding_config(model, dim)
                .ok_or_else(|| Usage("--dense needs --embed-endpoint (or DWRAG_EMBED_URL)".into()))?,
        )
    } else {
        None
    };

    let docs = ingest_corpus(corpus, format)?;
    let index = build_bm25_index(&docs, Bm25Params::default(), Analyzer::new(stopwords))?;
    create_dir(out)?;
    index.save(&out.join(BM25_FILE))?;
    let mut lines = String::new();
    for d in &docs {
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    write(&out.join(DOCS_FILE), lines)?;

    let mut dense_stats = serde_json::Value::Null;
    if let Some(config) = &embedding {
        let store = build_embedding_store(config, &HttpEmbedder::new(config), &docs, None)?;
        store.save(&out.join(DENSE_FILE))?;
        dense_stats = json!({ "model": store.model_name(), "dimension": store.dimension(), "rows": store.len() });
    }
    let stats = json!({
        "doc_count": index.doc_count(),
        "avg_doc_length": index.avg_doc_length(),
        "vocabulary": index.terms().count(),
        "dense": dense_stats,
    });
    write(&out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    RunManifest::new("index", &settings)?
        .arg("corpus", corpus.display())
        .arg("stopwords", stopwords)
        .arg("dense", dense)
        .input("corpus", corpus)?
        .write(out)?;
    println!(
        "indexed {} documents (avg length {:.2}) into {}",
        index.doc_count(),
        index.avg_doc_length(),
        out.display()
    );
    Ok(true)
}

fn orchestrator_usage(e: OrchestratorError) -> anyhow::Error {
    Usage(e.to_string()).into()
}

pub fn run(question: &str, out: &Path, settings: Settings) -> Result<bool> {
    let config = settings.rollout_config()?;
    let rollout = run_query(&config, question).map_err(orchestrator_usage)?;
    create_dir(out)?;
    write(&out.join(TRACE_FILE), rollout_to_text(&rollout))?;
    let manifest = RunManifest::new("run", &settings)?
        .arg("question", question)
        .index_inputs(settings.index_dir()?)?;
    with_mock_rules(manifest, &settings)?.write(out)?;
    info!(
        rounds = rollout.rounds.len(),
        tokens = rollout.ledger.total_tokens(),
        terminated_by = ?rollout.terminated_by,
        "rollout finished"
    );
    if rollout.failed() {
        eprintln!(
            "rollout failed: {}; partial trace in {}",
            rollout.error.as_deref().unwrap_or("unknown error"),
            out.join(TRACE_FILE).display()
        );
        return Ok(false);
    }
    println!("{}", rollout.final_answer.text);
    Ok(true)
}

fn bench_options(settings: &Settings, out: &Path) -> BenchOptions {
    let mut o = BenchOptions {
        out_dir: Some(out.to_path_buf()),
        ..BenchOptions::default()
    };
    if let Some(c) = settings.concurrency {
        o.concurrency = c.max(1);
    }
    o
}

fn print_aggregates(label: &str, a: &Aggregates) {
    let recall = a.recall.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{label}examples {}  failures {}  acc {:.4}  f1 {:.4}  em {:.4}  avg {:.4}  recall {recall}  rounds {:.2}  tokens {:.1}",
        a.examples, a.failures, a.accuracy, a.f1, a.em, a.avg, a.rounds, a.total_tokens
    );
}

pub fn eval(dataset: &Path, out: &Path, settings: Settings) -> Result<bool> {
    let examples = load_dataset(dataset)?;
    let config = settings.rollout_config()?;
    create_dir(out)?;
    let report = run_benchmark(&examples, &config, &bench_options(&settings, out))?;
    let manifest = RunManifest::new("eval", &settings)?
        .arg("dataset", dataset.display())
        .input("dataset", dataset)?
        .index_inputs(settings.index_dir()?)?;
    with_mock_rules(manifest, &settings)?.write(out)?;
    print_aggregates("", &report.aggregates);
    for row in report.per_example.iter().filter(|r| r.failed) {
        eprintln!("example {} failed", row.id);
    }
    Ok(!report.has_failures())
}

pub fn sweep(dataset: &Path, widths: &[u32], depths: &[u32], out: &Path, plot: bool, settings: Settings) -> Result<bool> {
    let examples = load_dataset(dataset)?;
    let config = settings.rollout_config()?;
    create_dir(out)?;
    let reports = run_sweep(&examples, &config, widths, depths, &bench_options(&settings, out))?;
    let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    let manifest = RunManifest::new("sweep", &settings)?
        .arg("dataset", dataset.display())
        .arg("widths", join(widths))
        .arg("depths", join(depths))
        .arg("plot", plot)
        .input("dataset", dataset)?
        .index_inputs(settings.index_dir()?)?;
    with_mock_rules(manifest, &settings)?.write(out)?;
    for r in &reports {
        print_aggregates(&format!("W={} D={}  ", r.config.width, r.config.max_depth), &r.aggregates);
    }
    if plot {
        let rows = read_sweep_csv(&out.join("sweep.csv"))?;
        write(&out.join(PLOT_FILE), render_f1_tokens_svg(&rows))?;
    }
    Ok(reports.iter().all(|r| !r.has_failures()))
}

pub fn plot(sweep_csv: &Path, out: &Path) -> Result<bool> {
    let rows = read_sweep_csv(sweep_csv).with_context(|| format!("reading {}", sweep_csv.display()))?;
    create_dir(out)?;
    write(&out.join(PLOT_FILE), render_f1_tokens_svg(&rows))?;
    RunManifest::new("plot", &Settings::default())?
        .arg("sweep", sweep_csv.display())
        .input("sweep", sweep_csv)?
        .write(out)?;
    println!("wrote {}", out.join(PLOT_FILE).display());
    Ok(true)
}

/// Stands in for a backend when prompts only need to be rendered.
struct NoBackend;

impl LlmBackend for NoBackend {
    fn generate(&self, _: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        Err(LlmError::InvalidRequest("no backend configured".into()))
    }
}

pub struct PrefArgs<'a> {
    pub mode: PrefMode,
    pub traces: &'a Path,
    pub dataset: &'a Path,
    pub lambda: f64,
    pub beta: f64,
    pub samples: usize,
    pub out: &'a Path,
}

/// Traces keyed by example id, in file-name order. Traces whose id is not
/// in the dataset are an error that lists them.
fn load_traces(dir: &Path, examples: &[DatasetExample]) -> Result<(BTreeMap<String, Rollout>, Vec<std::path::PathBuf>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "jsonl"));
    files.sort();
    let known: BTreeSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    let mut by_id = BTreeMap::new();
    let mut orphans = Vec::new();
    for path in &files {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rollout = parse_rollout_text(&text).with_context(|| format!("parsing {}", path.display()))?;
        match rollout.example_id.clone() {
            Some(id) if known.contains(id.as_str()) => {
                by_id.insert(id, rollout);
            }
            id => orphans.push(format!("{} ({})", path.display(), id.as_deref().unwrap_or("no example id"))),
        }
    }
    if !orphans.is_empty() {
        return Err(anyhow!("traces with no matching dataset id:\n  {}", orphans.join("\n  ")));
    }
    for e in examples {
        if !by_id.contains_key(&e.id) {
            warn!("no trace for example {}", e.id);
        }
    }
    Ok((by_id, files))
}

pub fn prefgen(args: PrefArgs<'_>, settings: Settings) -> Result<bool> {
    let params = DpoParams::new(args.beta, args.lambda).map_err(|e| Usage(e.to_string()))?;
    let examples = load_dataset(args.dataset)?;
    let (traces, files) = load_traces(args.traces, &examples)?;
    let sampling = args.mode == PrefMode::Evaluator && args.samples > 0;
    let backend: Arc<dyn LlmBackend> = if sampling {
        settings.llm_backend().map_err(|e| match e.downcast::<Usage>() {
            Ok(u) => Usage(format!("{u} (evaluator sampling needs a backend; pass --samples 0 to skip it)")).into(),
            Err(e) => e,
        })?
    } else {
        Arc::new(NoBackend)
    };
    let agents = Agents {
        backend,
        templates: Arc::new(settings.template_catalog()?),
        sampling: settings.sampling(),
        seed: settings.budget()?.seed,
        note_char_cap: settings.note_char_cap.unwrap_or(dwrag::model::DEFAULT_NOTE_CHAR_CAP),
        frozen_clock: true,
    };

    let matched = examples.iter().filter_map(|e| traces.get(&e.id).map(|r| (e, r)));
    let (pairs, summary) = match args.mode {
        PrefMode::Rewriter => {
            let mut samples = Vec::new();
            for (e, r) in matched {
                let gold: BTreeSet<DocId> = e.gold_paragraph_ids.iter().cloned().collect();
                samples.extend(rewriter_samples(&agents, r, &gold)?);
            }
            gen_rewriter_prefs(&samples)
        }
        PrefMode::Evaluator => {
            let mut samples = Vec::new();
            for (e, r) in matched {
                for s in evaluator_samples(&agents, r, &e.gold_answers)? {
                    if sampling {
                        let (drawn, _) = draw_decisions(&agents, &s, args.samples)?;
                        samples.push(s);
                        samples.extend(drawn);
                    } else {
                        samples.push(s);
                    }
                }
            }
            gen_evaluator_prefs(&samples, &params)?
        }
    };

    create_dir(args.out)?;
    export_pairs(&pairs, &args.out.join("pairs.jsonl"))?;
    let mode = match args.mode {
        PrefMode::Rewriter => "rewriter",
        PrefMode::Evaluator => "evaluator",
    };
    let report = json!({
        "mode": mode,
        "beta": params.beta,
        "lambda": params.lambda,
        "samples": if args.mode == PrefMode::Evaluator { args.samples } else { 0 },
        "traces": traces.len(),
        "summary": summary,
    });
    write(&args.out.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;

    let mut manifest = RunManifest::new("prefgen", &settings)?
        .arg("mode", mode)
        .arg("lambda", params.lambda)
        .arg("beta", params.beta)
        .arg("samples", args.samples)
        .arg("dataset", args.dataset.display())
        .arg("traces", args.traces.display())
        .input("dataset", args.dataset)?;
    for f in &files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        manifest = manifest.input(&format!("traces/{name}"), f)?;
    }
    if sampling {
        manifest = with_mock_rules(manifest, &settings)?;
    }
    manifest.write(args.out)?;
    println!(
        "{} pairs from {} groups ({} skipped): {} at weight 1, {} at weight {}",
        summary.pairs,
        summary.groups,
        summary.skipped_groups,
        summary.unit_weight_pairs,
        summary.lambda_weight_pairs,
        params.lambda
    );
    Ok(true)
}
