use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DecodingConfig, EmbeddingClient, LanguageModel};
use crate::error::{Error, Result};
use crate::retriever::fnv1a;
use crate::shapley::{Coalition, SetValueOracle};

/// A document the mock model reacts to, matched by substring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockDocument {
    pub text: String,
    /// Additive logit shift per answer token while the text is present.
    pub influence: Vec<f64>,
}

/// Script for the mock language model.
///
/// With documents `d` present in the prompt in slot order `r = 0, 1, ...`,
/// the probability of answer token `j` is
/// `σ(base_logits[j] + Σ slot_scale[r] · influence_d[j])`, with slot scales
/// defaulting to one. A document occurring twice contributes twice.
/// Document texts must not be substrings of one another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockLmSpec {
    pub answer: Vec<String>,
    pub base_logits: Vec<f64>,
    #[serde(default)]
    pub documents: Vec<MockDocument>,
    #[serde(default)]
    pub slot_scale: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn answer_tokens(m: usize) -> Vec<String> {
    (0..m)
        .map(|j| if j == 0 { "answer0".to_string() } else { format!(" answer{j}") })
        .collect()
}

impl MockLmSpec {
    /// A random game over `k` documents and `m` answer tokens: base logits
    /// drawn from N(0, 1), influences from N(0, 1.5²).
    pub fn random(k: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 1.0).expect("valid normal");
        let infl = Normal::new(0.0, 1.5).expect("valid normal");
        let base_logits = (0..m).map(|_| base.sample(&mut rng)).collect();
        let documents = (0..k)
            .map(|i| MockDocument {
                text: format!("[mock document {i}]"),
                influence: (0..m).map(|_| infl.sample(&mut rng)).collect(),
            })
            .collect();
        MockLmSpec { answer: answer_tokens(m), base_logits, documents, slot_scale: Vec::new() }
    }

    /// Influences derived from a hash of each text, so the same text gets
    /// the same influence wherever it appears.
    pub fn hashed(texts: &[String], answer: Vec<String>, seed: u64, scale: f64) -> Self {
        let m = answer.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_logits = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut documents: Vec<MockDocument> = Vec::new();
        for text in texts {
            if documents.iter().any(|d| &d.text == text) {
                continue;
            }
            let mut r = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()) ^ seed);
            let influence = (0..m)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    scale * z
                })
                .collect();
            documents.push(MockDocument { text: text.clone(), influence });
        }
        MockLmSpec { answer, base_logits, documents, slot_scale: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.answer.len();
        if m == 0 {
            return Err(Error::InvalidConfig("mock answer is empty".into()));
        }
        if self.base_logits.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: self.base_logits.len() });
        }
        for d in &self.documents {
            if d.influence.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: d.influence.len() });
            }
            if d.text.is_empty() {
                return Err(Error::InvalidConfig("mock document text is empty".into()));
            }
        }
        Ok(())
    }

    fn scale(&self, slot: usize) -> f64 {
        self.slot_scale.get(slot).copied().unwrap_or(1.0)
    }

    fn logits(&self, present: &[usize]) -> Vec<f64> {
        let mut z = self.base_logits.clone();
        for (slot, &d) in present.iter().enumerate() {
            let s = self.scale(slot);
            for (zj, b) in z.iter_mut().zip(&self.documents[d].influence) {
                *zj += s * b;
            }
        }
        z
    }

    /// Per-token probabilities with documents `present` in slot order.
    pub fn value(&self, present: &[usize]) -> Vec<f64> {
        self.logits(present).into_iter().map(sigmoid).collect()
    }

    /// Documents found in `prompt`, in order of occurrence.
    pub fn documents_in(&self, prompt: &str) -> Vec<usize> {
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for (i, d) in self.documents.iter().enumerate() {
            if self.documents[..i].iter().any(|e| e.text == d.text) {
                continue;
            }
            hits.extend(prompt.match_indices(d.text.as_str()).map(|(pos, _)| (pos, i)));
        }
        hits.sort_unstable();
        hits.into_iter().map(|(_, i)| i).collect()
    }

    /// Per-token log-probabilities of the scripted answer given `prompt`.
    pub fn logprobs(&self, prompt: &str) -> Vec<f64> {
        self.logits(&self.documents_in(prompt)).into_iter().map(log_sigmoid).collect()
    }
}

/// In-process mock language model with call accounting and fault injection.
#[derive(Debug)]
pub struct MockLm {
    spec: MockLmSpec,
    max_in_flight: usize,
    latency: Duration,
    score_calls: AtomicUsize,
    generate_calls: AtomicUsize,
    pending_failures: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockLm {
    pub fn new(spec: MockLmSpec) -> Result<Self> {
        spec.validate()?;
        Ok(MockLm {
            spec,
            max_in_flight: 1,
            latency: Duration::ZERO,
            score_calls: AtomicUsize::new(0),
            generate_calls: AtomicUsize::new(0),
            pending_failures: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    /// Sleeps this long inside every scoring call.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn spec(&self) -> &MockLmSpec {
        &self.spec
    }

    /// The next `n` calls fail with a transport error.
    pub fn fail_next(&self, n: usize) {
        self.pending_failures.store(n, Ordering::SeqCst);
    }

    /// Scoring calls made so far, failed attempts included.
    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    /// Largest number of scoring calls observed running concurrently.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.score_calls.store(0, Ordering::SeqCst);
        self.generate_calls.store(0, Ordering::SeqCst);
        self.peak_in_flight.store(0, Ordering::SeqCst);
    }

    fn injected_failure(&self) -> Result<()> {
        let took = self
            .pending_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        match took {
            Ok(_) => Err(Error::Transport("injected failure".into())),
            Err(_) => Ok(()),
        }
    }
}

impl LanguageModel for MockLm {
    fn generate(&self, _prompt: &str, decoding: &DecodingConfig) -> Result<Vec<String>> {
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        self.injected_failure()?;
        let n = decoding.max_tokens.min(self.spec.answer.len());
        if n == 0 {
            return Err(Error::EmptyGeneration);
        }
        Ok(self.spec.answer[..n].to_vec())
    }

    fn score_continuation(&self, prompt: &str, answer: &[String]) -> Result<Vec<f64>> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = (|| {
            if !self.latency.is_zero() {
                std::thread::sleep(self.latency);
            }
            self.injected_failure()?;
            if answer.len() > self.spec.answer.len() || answer != &self.spec.answer[..answer.len()] {
                return Err(Error::Alignment("answer does not match the mock script".into()));
            }
            let mut lp = self.spec.logprobs(prompt);
            lp.truncate(answer.len());
            Ok(lp)
        })();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// The mock model's value function evaluated in closed form over document
/// coalitions, with members placed in ascending index order.
#[derive(Debug, Clone)]
pub struct MockGame {
    pub spec: MockLmSpec,
}

impl MockGame {
    pub fn new(spec: MockLmSpec) -> Result<Self> {
        spec.validate()?;
        Ok(MockGame { spec })
    }

    pub fn random(k: usize, m: usize, seed: u64) -> Self {
        MockGame { spec: MockLmSpec::random(k, m, seed) }
    }
}

impl SetValueOracle for MockGame {
    fn arity(&self) -> usize {
        self.spec.documents.len()
    }

    fn output_dim(&self) -> usize {
        self.spec.answer.len()
    }

    fn evaluate(&self, coalition: Coalition) -> Result<Vec<f64>> {
        Ok(self.spec.value(&coalition.members()))
    }
}

/// Embedding client backed by a lookup table, falling back to a hashed
/// pseudo-random vector of the default dimension.
#[derive(Debug, Clone, Default)]
pub struct MockEmbedder {
    pub dim: usize,
    pub table: HashMap<String, Vec<f64>>,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        MockEmbedder { dim, table: HashMap::new() }
    }
}

impl EmbeddingClient for MockEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.table.get(text) {
            return Ok(v.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()));
        Ok((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}
