//! Text-generation backends: an OpenAI-compatible completion client and a
//! scripted mock, both behind [`LlmBackend`].

mod http;
mod mock;

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{parse_rules, Matcher, MockBackend, MockRule};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::HttpError;

/// Terminator tag every agent prompt asks the model to emit.
pub const END_TAG: &str = "[END]";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("malformed completion response: {0}")]
    Protocol(String),
    #[error("no mock rule matches prompt (sha256 {digest}): {preview:?}")]
    Unmatched { digest: String, preview: String },
    #[error("mock rules: {0}")]
    Rules(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!("top_p {}", self.top_p)));
        }
        if self.max_tokens < 1 {
            return Err(LlmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    /// Generation hit max_tokens without reaching a stop sequence.
    pub truncated: bool,
    /// The service reported stopping on one of the request's stop sequences
    /// (the sequence itself is then absent from `text`).
    pub stop_sequence_hit: bool,
    /// Token counts came from [`count_tokens_fallback`].
    pub estimated_usage: bool,
}

/// Sampling settings for agent calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Temperature used by the answer evaluator.
    pub evaluator_temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.5,
            top_p: 1.0,
            max_tokens: 600,
            evaluator_temperature: 0.0,
        }
    }
}

impl SamplingConfig {
    pub fn request(&self, prompt: String, seed: u64) -> GenerationRequest {
        GenerationRequest {
            prompt,
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            stop_sequences: vec![END_TAG.to_string()],
            seed: Some(seed),
        }
    }

    pub fn evaluator_request(&self, prompt: String, seed: u64) -> GenerationRequest {
        GenerationRequest {
            temperature: self.evaluator_temperature,
            ..self.request(prompt, seed)
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        (**self).generate(request)
    }
}

/// Token estimate used when a service omits usage: the number of maximal
/// alphanumeric runs, so punctuation splits words but is not itself counted.
pub fn count_tokens_fallback(text: &str) -> u64 {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .count() as u64
}
