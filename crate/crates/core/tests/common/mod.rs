#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use dwrag::agents::{DenseHandle, DocTable, Retriever};
use dwrag::corpus::{build_bm25_index, tokenize, Analyzer, Bm25Params, CorpusDocument};
use dwrag::dense::{EmbeddingConfig, EmbeddingStore, ScriptedEmbedder};
use dwrag::llm::{GenerationRequest, GenerationResponse, LlmBackend, LlmError, MockBackend, MockRule};
use dwrag::model::DocId;
use dwrag::orchestrator::RolloutConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn doc(id: &str, title: &str, text: &str) -> CorpusDocument {
    CorpusDocument {
        id: DocId::from(id),
        title: title.into(),
        paragraph_text: text.into(),
        is_abstract: false,
        url: None,
    }
}

pub const Q0: &str = "Who founded the company that owns Volvo Cars?";

pub fn scenario_docs() -> Vec<CorpusDocument> {
    vec![
        doc("d1", "Volvo Cars", "Volvo Cars is owned by Geely."),
        doc("d2", "Geely", "Geely is a Chinese automaker."),
        doc("d3", "Li Shufu", "Li Shufu founded Geely in 1986."),
        doc("d4", "Gothenburg", "Gothenburg hosts the Volvo Cars headquarters."),
        doc("d5", "Hangzhou", "Hangzhou is the home of Geely."),
    ]
}

/// Per-call token counts of the scripted scenario, as (prompt, completion).
pub const REWRITE_TOKENS: (u64, u64) = (100, 40);
pub const MEM_TOKENS: (u64, u64) = (80, 20);
pub const ANSWER_TOKENS: (u64, u64) = (50, 5);
pub const EVAL_TOKENS: (u64, u64) = (60, 2);
pub const SELECT_TOKENS: (u64, u64) = (70, 8);
pub const MERGE_TOKENS: (u64, u64) = (90, 30);

fn rewrite_block(items: &[(&str, &str)]) -> String {
    let mut s = String::from("<think>scripted</think>\n<queries>\n");
    for (i, (strategy, q)) in items.iter().enumerate() {
        s.push_str(&format!(
            "  <item rank=\"{}\"><strategy>{strategy}</strategy>\n    <query>{q}</query>\n  </item>\n",
            i + 1
        ));
    }
    s.push_str("</queries>\n[END]");
    s
}

pub const R1_MERGED: &str = "Volvo Cars belongs to Geely, a Chinese automaker.";
pub const R2_MERGED: &str = "Li Shufu founded Geely in 1986; Geely owns Volvo Cars.";

/// Mock rules for the frozen two-round scenario.
pub fn scenario_rules() -> Vec<MockRule> {
    let t = |r: MockRule, (p, c): (u64, u64)| r.with_tokens(p, c);
    vec![
        // rewrites: round 2 carries the merged note of round 1
        t(
            MockRule::pattern(
                "(?s)^You are an intelligent assistant.*- Context: Volvo Cars belongs to Geely",
                &rewrite_block(&[("bm25", "Geely founded"), ("dense", "who established Geely")]),
            ),
            REWRITE_TOKENS,
        ),
        t(
            MockRule::pattern(
                "(?s)^You are an intelligent assistant.*- Context: \n",
                &rewrite_block(&[("bm25", "Volvo Cars owner"), ("dense", "parent company of Volvo")]),
            ),
            REWRITE_TOKENS,
        ),
        // memory updates, keyed on the evidence block
        t(
            MockRule::pattern("(?s)^Act as the context manager.*New information: Title: Volvo Cars", "Volvo Cars is owned by Geely. [END]"),
            MEM_TOKENS,
        ),
        t(
            MockRule::pattern("(?s)^Act as the context manager.*New information: Title: Geely", "Geely is a Chinese automaker that owns Volvo Cars. [END]"),
            MEM_TOKENS,
        ),
        t(
            MockRule::pattern("(?s)^Act as the context manager.*\n\nTitle: Geely\n", "Li Shufu founded Geely, which owns Volvo Cars. [END]"),
            MEM_TOKENS,
        ),
        t(
            MockRule::pattern("(?s)^Act as the context manager.*\n\nTitle: Volvo Cars\n", "Geely was founded by Li Shufu in 1986. [END]"),
            MEM_TOKENS,
        ),
        // answers
        t(MockRule::pattern("(?s)^Answer the question.*\nVolvo Cars is owned by Geely.\n", "Geely [END]"), ANSWER_TOKENS),
        t(
            MockRule::pattern("(?s)^Answer the question.*\nGeely is a Chinese automaker that owns", "Chinese automaker Geely [END]"),
            ANSWER_TOKENS,
        ),
        t(MockRule::pattern("(?s)^Answer the question.*Li Shufu", "Li Shufu [END]"), ANSWER_TOKENS),
        // evaluations
        t(MockRule::pattern("(?s)^You are the answer evaluator.*Current query: Geely founded\n", "STOP [END]"), EVAL_TOKENS),
        t(MockRule::pattern("(?s)^You are the answer evaluator", "CONTINUE [END]"), EVAL_TOKENS),
        // selection
        t(MockRule::pattern("(?s)^Question: .*Answer 1: Geely\n", "Both point to Geely. <answer>Geely</answer> [END]"), SELECT_TOKENS),
        t(MockRule::pattern("(?s)^Question: .*Answer 1: Li Shufu\n", "<answer>Li Shufu</answer> [END]"), SELECT_TOKENS),
        // merges
        t(
            MockRule::pattern("(?s)^You are an expert at combining.*\\[Note 1\\]\nVolvo Cars is owned by Geely.", &format!("{R1_MERGED} [END]")),
            MERGE_TOKENS,
        ),
        t(
            MockRule::pattern("(?s)^You are an expert at combining.*\\[Note 1\\]\nLi Shufu founded Geely, which", &format!("{R2_MERGED} [END]")),
            MERGE_TOKENS,
        ),
    ]
}

/// Document embeddings and scripted query embeddings for the scenario.
pub fn scenario_retriever() -> Retriever {
    let docs = scenario_docs();
    let sparse = build_bm25_index(&docs, Bm25Params::default(), Analyzer::default()).unwrap();
    let rows = vec![
        (DocId::from("d1"), vec![0.5, 0.0, 0.0]),
        (DocId::from("d2"), vec![1.0, 0.0, 0.0]),
        (DocId::from("d3"), vec![0.0, 1.0, 0.0]),
        (DocId::from("d4"), vec![0.0, 0.0, 1.0]),
        (DocId::from("d5"), vec![0.25, 0.0, 0.0]),
    ];
    let embedder = ScriptedEmbedder::new([
        ("parent company of Volvo".to_string(), vec![1.0, 0.0, 0.0]),
        ("who established Geely".to_string(), vec![0.0, 1.0, 0.0]),
    ]);
    Retriever {
        sparse: Some(Arc::new(sparse)),
        dense: Some(DenseHandle {
            store: Arc::new(EmbeddingStore::from_rows("scripted", 3, rows).unwrap()),
            config: EmbeddingConfig::new("unused", "scripted", 3),
            embedder: Arc::new(embedder),
            docs: Arc::new(DocTable::from_documents(&docs)),
        }),
    }
}

pub fn scenario_config(backend: Arc<dyn LlmBackend>) -> RolloutConfig {
    let mut c = RolloutConfig::new(backend, scenario_retriever());
    c.retrieval_k = 2;
    c.frozen_clock = true;
    c
}

/// BM25 evaluated document by document straight from the formula.
pub fn brute_bm25(docs: &[CorpusDocument], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    const WH: [&str; 8] = ["what", "where", "when", "who", "whom", "which", "why", "how"];
    let toks: Vec<Vec<String>> = docs
        .iter()
        .map(|d| {
            let mut t = tokenize(&d.title);
            t.extend(tokenize(&d.paragraph_text));
            t
        })
        .collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(|t| t.len() as f64).sum::<f64>() / n;
    let mut terms: Vec<String> = Vec::new();
    for t in tokenize(query) {
        if !WH.contains(&t.as_str()) && !terms.contains(&t) {
            terms.push(t);
        }
    }
    let mut out = Vec::new();
    for (d, t) in docs.iter().zip(&toks) {
        let dl = t.len() as f64;
        let mut score = 0.0;
        let mut hit = false;
        for term in &terms {
            let tf = t.iter().filter(|x| *x == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let df = toks.iter().filter(|dt| dt.contains(term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        if hit {
            out.push((d.id.as_str().to_string(), score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn prompt_rng(prompt: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// Backend whose outputs are pseudo-random but fixed per (seed, prompt).
/// Rewrites are sometimes malformed, decisions sometimes unparseable.
pub struct RandomBackend {
    pub seed: u64,
    pub stop_probability: f64,
    pub tokens: (u64, u64),
}

impl LlmBackend for RandomBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        let p = &request.prompt;
        let mut rng = prompt_rng(p, self.seed);
        let text = if p.starts_with("You are an intelligent assistant") {
            let n: usize = p
                .split("produce exactly ")
                .nth(1)
                .and_then(|s| s.split(' ').next())
                .and_then(|s| s.parse().ok())
                .unwrap_or(1);
            if rng.gen_bool(0.1) {
                "no idea".to_string()
            } else {
                let items: Vec<(&str, String)> = (0..n)
                    .map(|_| {
                        let s = if rng.gen_bool(0.5) { "bm25" } else { "dense" };
                        (s, format!("w{} w{}", rng.gen_range(0..8), rng.gen_range(0..8)))
                    })
                    .collect();
                let refs: Vec<(&str, &str)> = items.iter().map(|(s, q)| (*s, q.as_str())).collect();
                rewrite_block(&refs)
            }
        } else if p.starts_with("You are the answer evaluator") {
            let r: f64 = rng.gen();
            if r < self.stop_probability {
                "STOP [END]".into()
            } else if r < self.stop_probability + 0.05 {
                "unsure".into()
            } else {
                "CONTINUE [END]".into()
            }
        } else if p.starts_with("Question: ") {
            format!("<answer>a{}</answer> [END]", rng.gen_range(0..4))
        } else {
            format!("t{} [END]", rng.gen_range(0..1000))
        };
        Ok(GenerationResponse {
            text,
            prompt_tokens: self.tokens.0,
            completion_tokens: self.tokens.1,
            latency_ms: 0,
            truncated: false,
            stop_sequence_hit: false,
            estimated_usage: false,
        })
    }
}

/// Sparse retriever over a corpus built from the words `w0..w7`.
pub fn random_retriever(seed: u64) -> Retriever {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<CorpusDocument> = (0..12)
        .map(|i| {
            let words: Vec<String> = (0..rng.gen_range(2..7)).map(|_| format!("w{}", rng.gen_range(0..8))).collect();
            doc(&format!("r{i:02}"), &format!("title {i}"), &words.join(" "))
        })
        .collect();
    Retriever::sparse(Arc::new(build_bm25_index(&docs, Bm25Params::default(), Analyzer::default()).unwrap()))
}

pub fn random_docs(rng: &mut ChaCha8Rng, n: usize, vocab: &[&str]) -> Vec<CorpusDocument> {
    (0..n)
        .map(|i| {
            let pick = |rng: &mut ChaCha8Rng, len: usize| {
                (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
            };
            let tl = rng.gen_range(0..3);
            let bl = rng.gen_range(1..12);
            let title = pick(rng, tl);
            let body = pick(rng, bl);
            doc(&format!("doc{i:02}"), &title, &body)
        })
        .collect()
}

pub fn mock(rules: Vec<MockRule>) -> Arc<MockBackend> {
    Arc::new(MockBackend::new(rules).unwrap())
}

pub fn ids<'a>(it: impl IntoIterator<Item = &'a DocId>) -> BTreeSet<String> {
    it.into_iter().map(|d| d.as_str().to_string()).collect()
}

pub fn count_by<T: Ord + Clone>(xs: &[T]) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x.clone()).or_insert(0) += 1;
    }
    m
}

/// Always-CONTINUE scripts with fixed per-call token counts, widths 1 to 5.
pub const R: (u64, u64) = (11, 7);
pub const M: (u64, u64) = (13, 5);
pub const A: (u64, u64) = (17, 2);
pub const E: (u64, u64) = (19, 1);
pub const S: (u64, u64) = (23, 3);
pub const G: (u64, u64) = (29, 4);

pub fn continue_rules() -> Vec<MockRule> {
    let mut rules = Vec::new();
    for w in 1..=5 {
        let items: String = (1..=w)
            .map(|k| format!("<item rank=\"{k}\"><strategy>bm25</strategy><query>w{k} w0</query></item>"))
            .collect();
        rules.push(
            MockRule::substring(&format!("produce exactly {w} rewritten"), &format!("<queries>{items}</queries>[END]"))
                .with_tokens(R.0, R.1),
        );
    }
    rules.push(MockRule::pattern("^Act as the context manager", "note [END]").with_tokens(M.0, M.1));
    rules.push(MockRule::pattern("^Answer the question", "w1 [END]").with_tokens(A.0, A.1));
    rules.push(MockRule::pattern("^You are the answer evaluator", "CONTINUE [END]").with_tokens(E.0, E.1));
    rules.push(MockRule::pattern("^Question: ", "<answer>w1</answer> [END]").with_tokens(S.0, S.1));
    rules.push(MockRule::pattern("^You are an expert at combining", "merged [END]").with_tokens(G.0, G.1));
    rules
}

pub fn expected_tokens(w: u64, d: u64) -> u64 {
    let t = |x: (u64, u64)| x.0 + x.1;
    let aggregation = if w > 1 { t(S) + t(G) } else { 0 };
    d * (t(R) + w * (t(M) + t(A) + t(E)) + aggregation)
}
