use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenerationRequest, GenerationResponse, LlmBackend, LlmError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "match", content = "payload", rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Substring(String),
    /// Regular expression searched anywhere in the prompt.
    Pattern(String),
}

/// One scripted response. Rules are tried in order; the first match wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(flatten)]
    pub matcher: Matcher,
    pub response: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

impl MockRule {
    pub fn new(matcher: Matcher, response: impl Into<String>, prompt_tokens: u64, completion_tokens: u64) -> Self {
        MockRule {
            matcher,
            response: response.into(),
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn exact(payload: &str, response: &str) -> Self {
        Self::new(Matcher::Exact(payload.into()), response, 0, 0)
    }

    pub fn substring(payload: &str, response: &str) -> Self {
        Self::new(Matcher::Substring(payload.into()), response, 0, 0)
    }

    pub fn pattern(payload: &str, response: &str) -> Self {
        Self::new(Matcher::Pattern(payload.into()), response, 0, 0)
    }

    pub fn with_tokens(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.prompt_tokens = prompt_tokens;
        self.completion_tokens = completion_tokens;
        self
    }
}

enum Compiled {
    Exact(String),
    Substring(String),
    Pattern(Regex),
}

impl Compiled {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Compiled::Exact(s) => prompt == s,
            Compiled::Substring(s) => prompt.contains(s.as_str()),
            Compiled::Pattern(re) => re.is_match(prompt),
        }
    }
}

/// Deterministic scripted backend. Responses depend only on the prompt, so
/// concurrent callers see the same results in any interleaving.
pub struct MockBackend {
    rules: Vec<(Compiled, MockRule)>,
    log: Mutex<Vec<GenerationRequest>>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend").field("rules", &self.rules.len()).finish()
    }
}

pub(crate) fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))[..16].to_string()
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Result<Self, LlmError> {
        let compiled = rules
            .into_iter()
            .enumerate()
            .map(|(i, rule)| {
                let c = match &rule.matcher {
                    Matcher::Exact(s) => Compiled::Exact(s.clone()),
                    Matcher::Substring(s) => Compiled::Substring(s.clone()),
                    Matcher::Pattern(p) => Compiled::Pattern(
                        Regex::new(p).map_err(|e| LlmError::Rules(format!("rule {}: {e}", i + 1)))?,
                    ),
                };
                Ok((c, rule))
            })
            .collect::<Result<Vec<_>, LlmError>>()?;
        Ok(MockBackend {
            rules: compiled,
            log: Mutex::new(Vec::new()),
        })
    }

    /// Reads rules from a JSON array or from one JSON object per line.
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Rules(format!("{}: {e}", path.display())))?;
        Self::new(parse_rules(&text)?)
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("mock log").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log").len()
    }
}

pub fn parse_rules(text: &str) -> Result<Vec<MockRule>, LlmError> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| LlmError::Rules(e.to_string()));
    }
    let mut rules = Vec::new();
    for (i, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Rules(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        rules.push(
            serde_json::from_str(&line)
                .map_err(|e| LlmError::Rules(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(rules)
}

impl LlmBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        request.validate()?;
        self.log.lock().expect("mock log").push(request.clone());
        let rule = self
            .rules
            .iter()
            .find(|(c, _)| c.matches(&request.prompt))
            .map(|(_, r)| r)
            .ok_or_else(|| LlmError::Unmatched {
                digest: prompt_digest(&request.prompt),
                preview: request.prompt.chars().take(80).collect(),
            })?;
        Ok(GenerationResponse {
            text: rule.response.clone(),
            prompt_tokens: rule.prompt_tokens,
            completion_tokens: rule.completion_tokens,
            latency_ms: 0,
            truncated: false,
            stop_sequence_hit: false,
            estimated_usage: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::SamplingConfig;

    fn req(prompt: &str) -> GenerationRequest {
        SamplingConfig::default().request(prompt.into(), 42)
    }

    #[test]
    fn exact_rule() {
        let m = MockBackend::new(vec![MockRule::exact("PING", "PONG [END]")]).unwrap();
        let r = m.generate(&req("PING")).unwrap();
        assert_eq!(r.text, "PONG [END]");
        assert_eq!(r.latency_ms, 0);
    }

    #[test]
    fn unmatched_names_digest() {
        let m = MockBackend::new(vec![MockRule::exact("PING", "PONG")]).unwrap();
        match m.generate(&req("PONG?")) {
            Err(LlmError::Unmatched { digest, .. }) => assert_eq!(digest, prompt_digest("PONG?")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn first_match_wins_and_tokens_reported() {
        let m = MockBackend::new(vec![
            MockRule::substring("abc", "first").with_tokens(17, 5),
            MockRule::pattern("a.c", "second"),
        ])
        .unwrap();
        let r = m.generate(&req("xxabcxx")).unwrap();
        assert_eq!(r.text, "first");
        assert_eq!((r.prompt_tokens, r.completion_tokens), (17, 5));
        assert_eq!(m.generate(&req("aXc")).unwrap().text, "second");
        assert_eq!(m.call_count(), 2);
    }

    #[test]
    fn bad_pattern_is_rule_error() {
        assert!(matches!(
            MockBackend::new(vec![MockRule::pattern("(", "x")]),
            Err(LlmError::Rules(_))
        ));
    }

    #[test]
    fn rule_file_formats() {
        let line = r#"{"match":"substring","payload":"Q","response":"A [END]","prompt_tokens":3,"completion_tokens":2}"#;
        let rules = parse_rules(&format!("{line}\n\n{line}\n")).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].matcher, Matcher::Substring("Q".into()));
        let arr = parse_rules(&format!("[{line}]")).unwrap();
        assert_eq!(arr, rules[..1]);
        let back = serde_json::to_string(&rules[0]).unwrap();
        assert_eq!(serde_json::from_str::<MockRule>(&back).unwrap(), rules[0]);
    }
}
