//! Layered settings: command-line flag, then config file, then environment,
//! then built-in defaults.
//!
//! The config file is TOML with the same keys as [`Settings`] (flag names
//! with `-` replaced by `_`). A run manifest is also accepted: its `[config]`
//! table is used. Relative paths in a file resolve against the file's
//! directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use dwrag::agents::{DenseHandle, DocTable, Retriever, TemplateCatalog, DEFAULT_RETRIEVAL_K};
use dwrag::corpus::{Analyzer, Bm25Index, CorpusDocument};
use dwrag::dense::{EmbeddingConfig, EmbeddingStore, HttpEmbedder};
use dwrag::llm::{HttpBackend, HttpBackendConfig, LlmBackend, MockBackend, SamplingConfig};
use dwrag::model::{BudgetConfig, DEFAULT_NOTE_CHAR_CAP};
use dwrag::orchestrator::{RolloutConfig, StrategyMode};
use serde::{Deserialize, Serialize};

use crate::Usage;

pub const ENV_BASE_URL: &str = "DWRAG_BASE_URL";
pub const ENV_MODEL: &str = "DWRAG_MODEL";
pub const ENV_API_KEY: &str = "DWRAG_API_KEY";
pub const ENV_EMBED_URL: &str = "DWRAG_EMBED_URL";
pub const ENV_EMBED_MODEL: &str = "DWRAG_EMBED_MODEL";

/// File names inside an index directory.
pub const BM25_FILE: &str = "bm25.json";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const DENSE_FILE: &str = "dense.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// TOML config file (or a run manifest).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Index directory written by `dwrag index`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Mock rule file (JSON array or JSON lines).
    #[arg(long)]
    pub mock_rules: Option<PathBuf>,
    /// Completion API base URL, e.g. http://localhost:8000/v1 [env: DWRAG_BASE_URL]
    #[arg(long)]
    pub base_url: Option<String>,
    /// [env: DWRAG_MODEL]
    #[arg(long)]
    pub model: Option<String>,
    /// [env: DWRAG_API_KEY]. Never written to manifests.
    #[arg(long)]
    pub api_key: Option<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Embeddings endpoint URL [env: DWRAG_EMBED_URL]
    #[arg(long)]
    pub embed_endpoint: Option<String>,
    /// [env: DWRAG_EMBED_MODEL]
    #[arg(long)]
    pub embed_model: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Directory of `<template>.txt` overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,

    /// Branches per round.
    #[arg(long)]
    pub width: Option<u32>,
    /// Maximum rounds.
    #[arg(long)]
    pub max_depth: Option<u32>,
    /// Total-token cap, checked between rounds.
    #[arg(long)]
    pub token_budget: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Passages per retrieval.
    #[arg(long)]
    pub k: Option<usize>,
    /// agentic, sparse_only or dense_only.
    #[arg(long)]
    pub strategy_mode: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub evaluator_temperature: Option<f64>,
    #[arg(long)]
    pub note_char_cap: Option<usize>,
    /// Record zero latency everywhere (on by default with the mock backend).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub frozen_clock: Option<bool>,
    /// Rollouts in flight during eval and sweep.
    #[arg(long)]
    pub concurrency: Option<usize>,
}

macro_rules! layer {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        Settings { config: $hi.config.or($lo.config), $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Settings {
    /// `self` wins over `lower` field by field.
    pub fn over(self, lower: Settings) -> Settings {
        layer!(self, lower;
            index, backend, mock_rules, base_url, model, api_key, timeout_ms,
            embed_endpoint, embed_model, embed_dim, templates,
            width, max_depth, token_budget, seed, k, strategy_mode,
            temperature, top_p, max_tokens, evaluator_temperature,
            note_char_cap, frozen_clock, concurrency,
        )
    }

    pub fn from_env() -> Settings {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Settings {
            base_url: var(ENV_BASE_URL),
            model: var(ENV_MODEL),
            api_key: var(ENV_API_KEY),
            embed_endpoint: var(ENV_EMBED_URL),
            embed_model: var(ENV_EMBED_MODEL),
            ..Settings::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if table.contains_key("tool") {
            if let Some(toml::Value::Table(inner)) = table.remove("config") {
                table = inner;
            }
        }
        let mut s: Settings = toml::Value::Table(table)
            .try_into()
            .with_context(|| format!("config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.index, &mut s.mock_rules, &mut s.templates].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    /// Flags over config file over environment.
    pub fn layered(self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        Ok(self.over(file).over(Settings::from_env()))
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.unwrap_or(if self.mock_rules.is_some() {
            BackendKind::Mock
        } else {
            BackendKind::Http
        })
    }

    pub fn strategy(&self) -> Result<StrategyMode> {
        match &self.strategy_mode {
            None => Ok(StrategyMode::Agentic),
            Some(s) => s.parse().map_err(|e: String| Usage(e).into()),
        }
    }

    pub fn budget(&self) -> Result<BudgetConfig> {
        let d = BudgetConfig::default();
        BudgetConfig::new(
            self.width.unwrap_or(d.width),
            self.max_depth.unwrap_or(d.max_depth),
            self.token_budget.or(d.max_total_tokens),
            self.seed.unwrap_or(d.seed),
        )
        .map_err(|e| Usage(e.to_string()).into())
    }

    pub fn sampling(&self) -> SamplingConfig {
        let d = SamplingConfig::default();
        SamplingConfig {
            temperature: self.temperature.unwrap_or(d.temperature),
            top_p: self.top_p.unwrap_or(d.top_p),
            max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
            evaluator_temperature: self.evaluator_temperature.unwrap_or(d.evaluator_temperature),
        }
    }

    pub fn frozen(&self) -> bool {
        self.frozen_clock.unwrap_or(self.backend_kind() == BackendKind::Mock)
    }

    pub fn template_catalog(&self) -> Result<TemplateCatalog> {
        match &self.templates {
            Some(dir) => Ok(TemplateCatalog::load_dir(dir)?),
            None => Ok(TemplateCatalog::default()),
        }
    }

    pub fn llm_backend(&self) -> Result<Arc<dyn LlmBackend>> {
        match self.backend_kind() {
            BackendKind::Mock => {
                let path = self
                    .mock_rules
                    .as_ref()
                    .ok_or_else(|| Usage("the mock backend needs --mock-rules".into()))?;
                Ok(Arc::new(MockBackend::from_file(path)?))
            }
            BackendKind::Http => {
                let url = self.base_url.as_ref().ok_or_else(|| {
                    Usage(format!("no completion endpoint: pass --base-url, set base_url in the config file, or set {ENV_BASE_URL}"))
                })?;
                let model = self
                    .model
                    .as_ref()
                    .ok_or_else(|| Usage(format!("no model name: pass --model or set {ENV_MODEL}")))?;
                let mut c = HttpBackendConfig::new(url, model);
                c.api_key = self.api_key.clone();
                if let Some(t) = self.timeout_ms {
                    c.timeout_ms = t;
                }
                Ok(Arc::new(HttpBackend::new(c)))
            }
        }
    }

    pub fn embedding_config(&self, model: &str, dimension: usize) -> Option<EmbeddingConfig> {
        let url = self.embed_endpoint.as_ref()?;
        let mut c = EmbeddingConfig::new(url, model, dimension);
        c.api_key = self.api_key.clone();
        Some(c)
    }

    pub fn index_dir(&self) -> Result<&Path> {
        self.index
            .as_deref()
            .ok_or_else(|| Usage("no index: pass --index or set index in the config file".into()).into())
    }

    /// Opens the sparse index and, when an embeddings endpoint is configured,
    /// the dense store.
    pub fn retriever(&self) -> Result<Retriever> {
        let dir = self.index_dir()?;
        let sparse = Bm25Index::load(&dir.join(BM25_FILE), Analyzer::default())?;
        let mut retriever = Retriever::sparse(Arc::new(sparse));
        let dense_path = dir.join(DENSE_FILE);
        if dense_path.exists() {
            let bytes = std::fs::read(&dense_path).with_context(|| format!("reading {}", dense_path.display()))?;
            let store = EmbeddingStore::from_bytes(&bytes)?;
            if let Some(m) = &self.embed_model {
                if m != store.model_name() {
                    return Err(Usage(format!(
                        "embedding model {m:?} does not match the index ({:?})",
                        store.model_name()
                    ))
                    .into());
                }
            }
            match self.embedding_config(store.model_name(), store.dimension()) {
                Some(config) => {
                    let docs = read_docs(&dir.join(DOCS_FILE))?;
                    retriever.dense = Some(DenseHandle {
                        embedder: Arc::new(HttpEmbedder::new(&config)),
                        config,
                        store: Arc::new(store),
                        docs: Arc::new(DocTable::from_documents(&docs)),
                    });
                }
                None => tracing::warn!("index has a dense store but no embeddings endpoint is configured; dense queries fall back to BM25"),
            }
        }
        Ok(retriever)
    }

    pub fn rollout_config(&self) -> Result<RolloutConfig> {
        let mut c = RolloutConfig::new(self.llm_backend()?, self.retriever()?);
        c.budget = self.budget()?;
        c.retrieval_k = self.k.unwrap_or(DEFAULT_RETRIEVAL_K);
        c.templates = Arc::new(self.template_catalog()?);
        c.strategy_mode = self.strategy()?;
        c.sampling = self.sampling();
        c.note_char_cap = self.note_char_cap.unwrap_or(DEFAULT_NOTE_CHAR_CAP);
        c.frozen_clock = self.frozen();
        c.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(c)
    }

    /// Every setting filled in, paths absolute, secrets dropped. This is
    /// what manifests record.
    pub fn resolved(&self) -> Result<Settings> {
        let budget = self.budget()?;
        let sampling = self.sampling();
        let abs = |p: &Option<PathBuf>| p.as_ref().map(|p| std::path::absolute(p).unwrap_or_else(|_| p.clone()));
        let kind = self.backend_kind();
        Ok(Settings {
            config: None,
            index: abs(&self.index),
            backend: Some(kind),
            mock_rules: abs(&self.mock_rules),
            base_url: self.base_url.clone().filter(|_| kind == BackendKind::Http),
            model: self.model.clone().filter(|_| kind == BackendKind::Http),
            api_key: None,
            timeout_ms: self.timeout_ms,
            embed_endpoint: self.embed_endpoint.clone(),
            embed_model: self.embed_model.clone(),
            embed_dim: self.embed_dim,
            templates: abs(&self.templates),
            width: Some(budget.width),
            max_depth: Some(budget.max_depth),
            token_budget: budget.max_total_tokens,
            seed: Some(budget.seed),
            k: Some(self.k.unwrap_or(DEFAULT_RETRIEVAL_K)),
            strategy_mode: Some(strategy_name(self.strategy()?).into()),
            temperature: Some(sampling.temperature),
            top_p: Some(sampling.top_p),
            max_tokens: Some(sampling.max_tokens),
            evaluator_temperature: Some(sampling.evaluator_temperature),
            note_char_cap: Some(self.note_char_cap.unwrap_or(DEFAULT_NOTE_CHAR_CAP)),
            frozen_clock: Some(self.frozen()),
            concurrency: self.concurrency,
        })
    }
}

fn strategy_name(m: StrategyMode) -> &'static str {
    match m {
        StrategyMode::Agentic => "agentic",
        StrategyMode::SparseOnly => "sparse_only",
        StrategyMode::DenseOnly => "dense_only",
    }
}

pub fn read_docs(path: &Path) -> Result<Vec<CorpusDocument>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}
