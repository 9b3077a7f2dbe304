//! Blocking JSON-over-HTTP with bounded retries, shared by the completion
//! and embedding clients.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum HttpError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("cannot decode response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<HttpError> },
}

impl HttpError {
    /// Transport failures, 429 and 5xx are retried; other 4xx and decode errors are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            HttpError::Transport(_) => true,
            HttpError::Status { code, .. } => *code >= 500 || *code == 429,
            HttpError::Decode(_) | HttpError::Exhausted { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, failed_attempts: u32) -> Duration {
        let factor = 1u64 << failed_attempts.saturating_sub(1).min(16);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor))
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// attempt budget is spent.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, HttpError>,
) -> Result<T, HttpError> {
    let attempts = policy.max_attempts.max(1);
    let mut n = 0;
    loop {
        n += 1;
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && n < attempts => {
                tracing::warn!(attempt = n, error = %e, "retrying request");
                std::thread::sleep(policy.backoff(n));
            }
            Err(e) if e.is_retryable() => {
                return Err(HttpError::Exhausted {
                    attempts: n,
                    last: Box::new(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(timeout: Duration, api_key: Option<String>, retry: RetryPolicy) -> Self {
        JsonClient {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            api_key,
            retry,
        }
    }

    pub fn post(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value, HttpError> {
        with_retries(&self.retry, || self.post_once(url, body))
    }

    fn post_once(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value, HttpError> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json::<serde_json::Value>()
                .map_err(|e| HttpError::Decode(e.to_string())),
            Err(ureq::Error::Status(code, resp)) => Err(HttpError::Status {
                code,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(HttpError::Transport(t.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 1,
        }
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_millis(250));
        assert_eq!(p.backoff(2), Duration::from_millis(500));
        assert_eq!(p.backoff(3), Duration::from_millis(1000));
    }

    #[test]
    fn retries_5xx_then_succeeds() {
        let calls = Cell::new(0);
        let out = with_retries(&fast(), || {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(HttpError::Status { code: 503, body: String::new() })
            } else {
                Ok(7)
            }
        });
        assert_eq!(out, Ok(7));
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn does_not_retry_4xx() {
        let calls = Cell::new(0);
        let out: Result<(), _> = with_retries(&fast(), || {
            calls.set(calls.get() + 1);
            Err(HttpError::Status { code: 400, body: "bad".into() })
        });
        assert!(matches!(out, Err(HttpError::Status { code: 400, .. })));
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn gives_up_after_budget() {
        let calls = Cell::new(0);
        let out: Result<(), _> = with_retries(&fast(), || {
            calls.set(calls.get() + 1);
            Err(HttpError::Transport("refused".into()))
        });
        assert!(matches!(out, Err(HttpError::Exhausted { attempts: 3, .. })));
        assert_eq!(calls.get(), 3);
    }
}
