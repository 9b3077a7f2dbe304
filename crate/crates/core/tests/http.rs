use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use dwrag::corpus::CorpusDocument;
use dwrag::dense::{build_embedding_store, dense_search, DenseError, EmbeddingConfig, HttpEmbedder};
use dwrag::llm::{GenerationRequest, HttpBackend, HttpBackendConfig, LlmBackend, LlmError, SamplingConfig};
use dwrag::model::DocId;
use dwrag::transport::{HttpError, RetryPolicy};
use serde_json::{json, Value};

type Seen = Arc<Mutex<Vec<(Value, Option<String>)>>>;
type Handler = dyn Fn(usize, &Value) -> (u16, Value) + Send + Sync;

struct Stub {
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
    seen: Seen,
}

impl Stub {
    fn start(handler: Box<Handler>) -> Stub {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let seen: Seen = Arc::default();
        let calls = AtomicUsize::new(0);
        let worker = {
            let (server, seen) = (server.clone(), seen.clone());
            std::thread::spawn(move || {
                for mut rq in server.incoming_requests() {
                    let mut body = String::new();
                    rq.as_reader().read_to_string(&mut body).unwrap();
                    let v: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                    let auth = rq
                        .headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string());
                    let n = calls.fetch_add(1, Ordering::SeqCst);
                    let (status, payload) = handler(n, &v);
                    seen.lock().unwrap().push((v, auth));
                    let _ = rq.respond(tiny_http::Response::from_string(payload.to_string()).with_status_code(status));
                }
            })
        };
        Stub {
            server,
            worker: Some(worker),
            seen,
        }
    }

    fn url(&self) -> String {
        format!("http://{}", self.server.server_addr().to_ip().unwrap())
    }

    fn requests(&self) -> Vec<(Value, Option<String>)> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        initial_backoff_ms: 1,
    }
}

fn backend(stub: &Stub) -> HttpBackend {
    let mut c = HttpBackendConfig::new(format!("{}/v1/", stub.url()), "m");
    c.retry = fast();
    c.timeout_ms = 2000;
    c.api_key = Some("secret".into());
    HttpBackend::new(c)
}

fn request(prompt: &str) -> GenerationRequest {
    SamplingConfig::default().request(prompt.into(), 7)
}

fn completion(text: &str, finish: &str) -> Value {
    json!({"choices": [{"text": text, "finish_reason": finish}], "usage": {"prompt_tokens": 12, "completion_tokens": 3}})
}

#[test]
fn server_errors_are_retried() {
    let stub = Stub::start(Box::new(|n, _| {
        if n < 2 {
            (503, json!({"error": "busy"}))
        } else {
            (200, completion("fine", "stop"))
        }
    }));
    let r = backend(&stub).generate(&request("hi")).unwrap();
    assert_eq!(r.text, "fine");
    assert_eq!((r.prompt_tokens, r.completion_tokens), (12, 3));
    assert!(r.stop_sequence_hit && !r.truncated && !r.estimated_usage);
    let reqs = stub.requests();
    assert_eq!(reqs.len(), 3);
    assert_eq!(reqs[0].1.as_deref(), Some("Bearer secret"));
    assert_eq!(reqs[0].0["seed"], 7);
    assert_eq!(reqs[0].0["prompt"], "hi");
}

#[test]
fn rate_limits_are_retried() {
    let stub = Stub::start(Box::new(|n, _| {
        if n == 0 {
            (429, json!({"error": "slow down"}))
        } else {
            (200, completion("ok", "stop"))
        }
    }));
    assert_eq!(backend(&stub).generate(&request("hi")).unwrap().text, "ok");
    assert_eq!(stub.requests().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(Box::new(|_, _| (400, json!({"error": "bad"}))));
    match backend(&stub).generate(&request("hi")) {
        Err(LlmError::Http(HttpError::Status { code: 400, .. })) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn retries_exhausted() {
    let stub = Stub::start(Box::new(|_, _| (500, json!({}))));
    let err = backend(&stub).generate(&request("hi")).unwrap_err();
    assert!(matches!(err, LlmError::Http(HttpError::Exhausted { attempts: 3, .. })), "{err:?}");
    assert_eq!(stub.requests().len(), 3);
}

#[test]
fn missing_usage_is_estimated_and_terminator_cut() {
    let stub = Stub::start(Box::new(|_, _| {
        (200, json!({"choices": [{"text": "two words [END] trailing", "finish_reason": "length"}]}))
    }));
    let r = backend(&stub).generate(&request("one two three")).unwrap();
    assert_eq!(r.text, "two words ");
    assert!(r.estimated_usage && r.truncated && r.stop_sequence_hit);
    assert_eq!((r.prompt_tokens, r.completion_tokens), (3, 2));
}

#[test]
fn malformed_body_is_protocol_error() {
    let stub = Stub::start(Box::new(|_, _| (200, json!({"choices": []}))));
    assert!(matches!(backend(&stub).generate(&request("x")), Err(LlmError::Protocol(_))));
}

fn embed_stub() -> Stub {
    // vector = [len(text), 1, index-in-batch]; answers in reverse order
    Stub::start(Box::new(|_, body| {
        let inputs = body["input"].as_array().cloned().unwrap_or_default();
        let mut data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| json!({"index": i, "embedding": [t.as_str().unwrap().len() as f32, 1.0, i as f32]}))
            .collect();
        data.reverse();
        (200, json!({"data": data}))
    }))
}

fn docs(n: usize) -> Vec<CorpusDocument> {
    (0..n)
        .map(|i| CorpusDocument {
            id: DocId(format!("e{i}")),
            title: "t".into(),
            paragraph_text: "x".repeat(i + 1),
            is_abstract: false,
            url: None,
        })
        .collect()
}

#[test]
fn embedding_store_over_http() {
    let stub = embed_stub();
    let mut config = EmbeddingConfig::new(format!("{}/v1/embeddings", stub.url()), "emb", 3);
    config.batch_size = 2;
    config.max_in_flight = 2;
    config.retry = fast();
    let embedder = HttpEmbedder::new(&config);
    let store = build_embedding_store(&config, &embedder, &docs(5), None).unwrap();
    assert_eq!(store.len(), 5);
    for i in 0..5 {
        // "t\n" plus i+1 characters
        assert_eq!(store.row(i)[0], (i + 3) as f32);
        assert_eq!(store.row(i)[2], (i % 2) as f32);
    }
    let reqs = stub.requests();
    assert_eq!(reqs.len(), 3);
    assert!(reqs.iter().all(|(v, _)| v["model"] == "emb"));

    let hits = dense_search(&store, &config, &embedder, "q", 2).unwrap();
    assert_eq!(hits[0].id.as_str(), "e4");
    assert_eq!(hits[0].score, 7.0 + 1.0);
}

#[test]
fn embedding_dimension_checked() {
    let stub = embed_stub();
    let mut config = EmbeddingConfig::new(format!("{}/v1/embeddings", stub.url()), "emb", 4);
    config.retry = fast();
    let err = build_embedding_store(&config, &HttpEmbedder::new(&config), &docs(2), None).unwrap_err();
    assert!(matches!(err, DenseError::DimensionMismatch { .. }), "{err:?}");
}
