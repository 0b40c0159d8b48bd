use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    DecodingConfig, EmbeddingClient, GradientOracle, GradientOracleRequest, GradientOracleResponse, LanguageModel,
    RetryPolicy, Semaphore,
};
use crate::error::{Error, Result};

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_in_flight() -> usize {
    4
}

/// Connection settings for an OpenAI-compatible completions server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmClientConfig {
    pub base_url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
}

impl LmClientConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        LmClientConfig {
            base_url: base_url.into(),
            model: String::new(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            retry: RetryPolicy::default(),
            auth_env: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() {
            return Err(Error::InvalidConfig("base_url is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::InvalidConfig("timeout_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

/// Blocking client for `/v1/completions`, `/v1/embeddings` and a `/grad`
/// retriever gradient endpoint.
pub struct OpenAiClient {
    config: LmClientConfig,
    agent: ureq::Agent,
    permits: Semaphore,
}

impl OpenAiClient {
    pub fn new(config: LmClientConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Semaphore::new(config.max_in_flight);
        Ok(OpenAiClient { config, agent, permits })
    }

    pub fn config(&self) -> &LmClientConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn bearer(&self) -> Result<Option<String>> {
        match &self.config.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(|t| Some(format!("Bearer {t}")))
                .map_err(|_| Error::Auth(format!("environment variable {var} is not set"))),
        }
    }

    fn post_once<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T> {
        let _permit = self.permits.acquire();
        let mut request = self.agent.post(self.url(path));
        if let Some(token) = self.bearer()? {
            request = request.header("Authorization", token);
        }
        let mut response = request.send_json(body).map_err(transport)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(transport)?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| Error::Schema(format!("malformed {path} response: {e}"))),
            401 | 403 => Err(Error::Auth(format!("{path} returned {status}"))),
            429 | 500..=599 => Err(Error::Transport(format!("{path} returned {status}: {}", snippet(&text)))),
            _ => Err(Error::Precondition(format!("{path} rejected the request with {status}: {}", snippet(&text)))),
        }
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T> {
        self.config.retry.run(|| self.post_once(path, body))
    }

    /// Capability probe: the server must echo a prompt with per-token
    /// log-probabilities and character offsets.
    pub fn probe(&self) -> Result<()> {
        let body = json!({
            "model": self.config.model,
            "prompt": "capability probe",
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let response: CompletionResponse = self.post_once("/v1/completions", &body)?;
        let supported = response
            .choices
            .first()
            .and_then(|c| c.logprobs.as_ref())
            .is_some_and(|lp| !lp.tokens.is_empty() && lp.text_offset.len() == lp.tokens.len());
        if supported {
            Ok(())
        } else {
            Err(Error::Precondition("endpoint does not return echoed log-probabilities".into()))
        }
    }
}

fn transport(e: ureq::Error) -> Error {
    Error::Transport(e.to_string())
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

/// Sums the returned token log-probabilities inside each answer token's
/// character span. Every answer token boundary must coincide with a
/// returned token boundary.
fn align(prompt: &str, answer: &[String], lp: &Logprobs) -> Result<Vec<f64>> {
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(Error::Alignment("logprobs arrays differ in length".into()));
    }
    let mut spans = Vec::with_capacity(answer.len());
    let mut start = prompt.chars().count();
    for tok in answer {
        let end = start + tok.chars().count();
        spans.push((start, end));
        start = end;
    }
    let mut out = vec![0.0; answer.len()];
    let mut hit = vec![false; answer.len()];
    for ((tok, lp_tok), &off) in lp.tokens.iter().zip(&lp.token_logprobs).zip(&lp.text_offset) {
        let tok_end = off + tok.chars().count();
        for (i, &(s, e)) in spans.iter().enumerate() {
            let overlaps = off < e && tok_end > s;
            if !overlaps {
                continue;
            }
            if off < s || tok_end > e {
                return Err(Error::Alignment(format!(
                    "server token {tok:?} at offset {off} straddles answer token {i}"
                )));
            }
            let value = lp_tok.ok_or_else(|| Error::Alignment(format!("missing log-probability for answer token {i}")))?;
            out[i] += value;
            hit[i] = true;
        }
    }
    if let Some(i) = hit.iter().position(|h| !h) {
        return Err(Error::Alignment(format!("no server token covers answer token {i}")));
    }
    Ok(out)
}

impl LanguageModel for OpenAiClient {
    fn generate(&self, prompt: &str, decoding: &DecodingConfig) -> Result<Vec<String>> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": decoding.max_tokens,
            "temperature": 0.0,
            "seed": decoding.seed,
            "logprobs": 1,
        });
        let response: CompletionResponse = self.post("/v1/completions", &body)?;
        let choice = response.choices.into_iter().next().ok_or(Error::EmptyGeneration)?;
        let tokens = match choice.logprobs {
            Some(lp) => lp.tokens,
            None if choice.text.is_empty() => Vec::new(),
            None => vec![choice.text],
        };
        if tokens.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        Ok(tokens)
    }

    fn score_continuation(&self, prompt: &str, answer: &[String]) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::Precondition("prompt must be non-empty for echo scoring".into()));
        }
        let full: String = std::iter::once(prompt).chain(answer.iter().map(String::as_str)).collect();
        let body = json!({
            "model": self.config.model,
            "prompt": full,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let response: CompletionResponse = self.post("/v1/completions", &body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Alignment("response has no choices".into()))?;
        let lp = choice.logprobs.ok_or_else(|| Error::Alignment("response has no logprobs".into()))?;
        align(prompt, answer, &lp)
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}

impl EmbeddingClient for OpenAiClient {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let body = json!({ "model": self.config.model, "input": text });
        let response: EmbeddingResponse = self.post("/v1/embeddings", &body)?;
        response
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::Schema("embedding response has no data".into()))
    }
}

impl GradientOracle for OpenAiClient {
    fn gradient(&self, request: &GradientOracleRequest) -> Result<GradientOracleResponse> {
        self.post("/grad", &serde_json::to_value(request)?)
    }
}
