use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{count_tokens_fallback, GenerationRequest, GenerationResponse, LlmBackend, LlmError, END_TAG};
use crate::transport::{JsonClient, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL including the API prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout_ms: 120_000,
            retry: RetryPolicy::default(),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Client for an OpenAI-compatible `POST {base}/completions` endpoint.
///
/// Request body: `model`, `prompt`, `temperature`, `top_p`, `max_tokens`,
/// `stop`, and `seed` when set. The first choice's `text` is the output;
/// `finish_reason == "length"` marks truncation and `"stop"` a stop-sequence
/// hit. `usage.prompt_tokens` / `usage.completion_tokens` feed the ledger,
/// falling back to an estimate when absent.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: JsonClient,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let client = JsonClient::new(
            Duration::from_millis(config.timeout_ms),
            config.api_key.clone(),
            config.retry,
        );
        HttpBackend { config, client }
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn body(&self, request: &GenerationRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "stop": request.stop_sequences,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl LlmBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        request.validate()?;
        let started = Instant::now();
        let value = self.client.post(&self.config.endpoint(), &self.body(request))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let parsed: CompletionResponse =
            serde_json::from_value(value).map_err(|e| LlmError::Protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Protocol("no choices".into()))?;

        let mut text = choice.text;
        let mut stop_hit = choice.finish_reason.as_deref() == Some("stop");
        // Not every server honours `stop`.
        if let Some(pos) = text.find(END_TAG) {
            text.truncate(pos);
            stop_hit = true;
        }
        let truncated = choice.finish_reason.as_deref() == Some("length");

        let usage = parsed.usage.and_then(|u| Some((u.prompt_tokens?, u.completion_tokens?)));
        let (prompt_tokens, completion_tokens, estimated) = match usage {
            Some((p, c)) => (p, c, false),
            None => (
                count_tokens_fallback(&request.prompt),
                count_tokens_fallback(&text),
                true,
            ),
        };
        Ok(GenerationResponse {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms,
            truncated,
            stop_sequence_hit: stop_hit,
            estimated_usage: estimated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_joins_cleanly() {
        assert_eq!(
            HttpBackendConfig::new("http://h:1/v1/", "m").endpoint(),
            "http://h:1/v1/completions"
        );
    }

    #[test]
    fn body_forwards_sampling_params() {
        let b = HttpBackend::new(HttpBackendConfig::new("http://h/v1", "qwen"));
        let req = GenerationRequest {
            prompt: "p".into(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 600,
            stop_sequences: vec![END_TAG.into()],
            seed: Some(42),
        };
        let body = b.body(&req);
        assert_eq!(body["model"], "qwen");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["max_tokens"], 600);
        assert_eq!(body["stop"][0], "[END]");
        assert_eq!(body["seed"], 42);
    }
}
