//! Model access: language-model scoring and generation, text embeddings,
//! and retriever gradients, each with an HTTP client and an offline mock.

mod http;
mod mock;
mod server;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{LmClientConfig, OpenAiClient};
pub use mock::{MockDocument, MockEmbedder, MockGame, MockLm, MockLmSpec};
pub use server::{MockServer, MockServerConfig};

use crate::error::{Error, Result};
use crate::retriever::{EmbeddingSequence, ReferenceRetriever, Side};

/// Greedy decoding settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingConfig {
    /// Hard cap on generated tokens.
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig { max_tokens: 256, seed: 0 }
    }
}

/// An autoregressive language model reachable for generation and for
/// teacher-forced scoring of a fixed continuation.
pub trait LanguageModel: Send + Sync {
    /// Greedy generation; returns the generated tokens as surface strings.
    fn generate(&self, prompt: &str, decoding: &DecodingConfig) -> Result<Vec<String>>;

    /// Log-probability of each `answer` token given `prompt` followed by the
    /// preceding answer tokens.
    fn score_continuation(&self, prompt: &str, answer: &[String]) -> Result<Vec<f64>>;

    /// Requests that may be in flight at once.
    fn max_in_flight(&self) -> usize {
        1
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn generate(&self, prompt: &str, decoding: &DecodingConfig) -> Result<Vec<String>> {
        (**self).generate(prompt, decoding)
    }
    fn score_continuation(&self, prompt: &str, answer: &[String]) -> Result<Vec<f64>> {
        (**self).score_continuation(prompt, answer)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn generate(&self, prompt: &str, decoding: &DecodingConfig) -> Result<Vec<String>> {
        (**self).generate(prompt, decoding)
    }
    fn score_continuation(&self, prompt: &str, answer: &[String]) -> Result<Vec<f64>> {
        (**self).score_continuation(prompt, answer)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

/// Per-token log-probabilities of `answer` under `prompt`, exactly one per
/// answer token.
pub fn forced_continuation_logprobs<L: LanguageModel + ?Sized>(
    client: &L,
    prompt: &str,
    answer: &[String],
) -> Result<Vec<f64>> {
    if answer.is_empty() {
        return Err(Error::Precondition("answer must contain at least one token".into()));
    }
    let lp = client.score_continuation(prompt, answer)?;
    if lp.len() != answer.len() {
        return Err(Error::Alignment(format!(
            "{} log-probabilities for {} answer tokens",
            lp.len(),
            answer.len()
        )));
    }
    if let Some(index) = lp.iter().position(|x| x.is_nan() || *x > 0.0) {
        return Err(Error::Alignment(format!("invalid log-probability at token {index}")));
    }
    Ok(lp)
}

/// Text embedding endpoint.
pub trait EmbeddingClient: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Wraps an embedding client and pins the vector dimension seen on the
/// first call.
pub struct DimensionChecked<E> {
    inner: E,
    dim: Mutex<Option<usize>>,
}

impl<E: EmbeddingClient> DimensionChecked<E> {
    pub fn new(inner: E) -> Self {
        DimensionChecked { inner, dim: Mutex::new(None) }
    }

    pub fn dimension(&self) -> Option<usize> {
        *self.dim.lock().expect("dimension lock")
    }
}

impl<E: EmbeddingClient> EmbeddingClient for DimensionChecked<E> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        embed_text(self, text)
    }
}

/// Embeds `text`, enforcing the dimension cached on the first call.
pub fn embed_text<E: EmbeddingClient>(client: &DimensionChecked<E>, text: &str) -> Result<Vec<f64>> {
    let v = client.inner.embed(text)?;
    let mut dim = client.dim.lock().expect("dimension lock");
    match *dim {
        None => *dim = Some(v.len()),
        Some(d) if d != v.len() => return Err(Error::DimensionMismatch { expected: d, found: v.len() }),
        Some(_) => {}
    }
    Ok(v)
}

/// Wire request for a retriever gradient: the attributed side's embeddings
/// and the fixed companion side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOracleRequest {
    pub side: Side,
    /// `n × h` embeddings of the attributed side.
    pub embeddings: Vec<Vec<f64>>,
    /// Pooling mask for `embeddings`; all positions when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    /// Embeddings of the other side, held fixed.
    pub companion: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub companion_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOracleResponse {
    pub score: f64,
    /// `∂s/∂φ`, same shape as the request embeddings.
    pub gradient: Vec<Vec<f64>>,
}

/// Returns a retrieval score and its gradient with respect to one side's
/// embeddings.
pub trait GradientOracle: Sync {
    fn gradient(&self, request: &GradientOracleRequest) -> Result<GradientOracleResponse>;
}

/// Validates shapes around a [`GradientOracle`] call.
pub fn gradient_oracle<G: GradientOracle + ?Sized>(
    client: &G,
    request: &GradientOracleRequest,
) -> Result<GradientOracleResponse> {
    let n = request.embeddings.len();
    let h = request.embeddings.first().map_or(0, Vec::len);
    if request.embeddings.iter().any(|r| r.len() != h) || request.companion.iter().any(|r| r.len() != h) {
        return Err(Error::Shape("embedding rows must share one hidden size".into()));
    }
    let response = client.gradient(request)?;
    if response.gradient.len() != n || response.gradient.iter().any(|r| r.len() != h) {
        return Err(Error::Shape(format!("gradient does not match the {n}x{h} request")));
    }
    Ok(response)
}

impl GradientOracle for ReferenceRetriever {
    fn gradient(&self, request: &GradientOracleRequest) -> Result<GradientOracleResponse> {
        let emb = EmbeddingSequence::from_rows(&request.embeddings)?;
        let companion = EmbeddingSequence::from_rows(&request.companion)?;
        let h = self.encoder(request.side).hidden();
        for found in [emb.hidden(), companion.hidden()] {
            if found != h {
                return Err(Error::DimensionMismatch { expected: h, found });
            }
        }
        let mask = request.mask.clone().unwrap_or_else(|| vec![true; emb.positions()]);
        let companion_mask = request
            .companion_mask
            .clone()
            .unwrap_or_else(|| vec![true; companion.positions()]);
        let (score, grad) =
            self.score_and_gradient(request.side, &emb.vectors, &mask, &companion.vectors, &companion_mask)?;
        Ok(GradientOracleResponse {
            score,
            gradient: EmbeddingSequence { vectors: grad }.to_rows(),
        })
    }
}

/// How often and how patiently to retry transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Additional attempts after the first.
    pub retries: usize,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { retries: 3, backoff_ms: 200 }
    }
}

impl RetryPolicy {
    /// Runs `op`, retrying while it fails with a transient error.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.retries => {
                    let delay = self.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("transient failure (attempt {}): {e}; retrying in {delay} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// A language model whose calls are retried under a [`RetryPolicy`].
pub struct Retrying<L> {
    pub inner: L,
    pub policy: RetryPolicy,
}

impl<L: LanguageModel> LanguageModel for Retrying<L> {
    fn generate(&self, prompt: &str, decoding: &DecodingConfig) -> Result<Vec<String>> {
        self.policy.run(|| self.inner.generate(prompt, decoding))
    }
    fn score_continuation(&self, prompt: &str, answer: &[String]) -> Result<Vec<f64>> {
        self.policy.run(|| self.inner.score_continuation(prompt, answer))
    }
    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.freed.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit { owner: self }
    }
}

pub struct Permit<'a> {
    owner: &'a Semaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.owner.permits.lock().expect("semaphore lock") += 1;
        self.owner.freed.notify_one();
    }
}
