use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::encoder::{EmbeddingSequence, ReferenceEncoder, ReferenceRetriever, Side};
use super::tokenize::{TokenSequence, MASK, PAD, UNK};
use crate::error::{Error, Result};
use crate::gateway::{GradientOracle, GradientOracleRequest};

/// Default number of integration steps.
pub const DEFAULT_STEPS: usize = 100;

/// What replaces non-special tokens in the IG baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Zero vectors, positional term included.
    Zeros,
    Mask,
    Pad,
    #[default]
    Unk,
}

impl BaselineMode {
    pub fn token(self) -> Option<u32> {
        match self {
            BaselineMode::Zeros => None,
            BaselineMode::Mask => Some(MASK),
            BaselineMode::Pad => Some(PAD),
            BaselineMode::Unk => Some(UNK),
        }
    }
}

/// Per-token retriever attribution for one side of a query/document pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector {
    pub scores: Vec<f64>,
    pub target: Side,
    pub baseline_mode: BaselineMode,
    pub steps: usize,
    /// Retrieval score at the input.
    pub score_input: f64,
    /// Retrieval score with the target side at its baseline.
    pub score_baseline: f64,
}

impl SaliencyVector {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// See [`additivity_ratio`].
    pub fn additivity_ratio(&self) -> Result<f64> {
        additivity_ratio(self, self.score_input, self.score_baseline)
    }
}

/// `Φ⁰(x)`: non-special rows become the mode token's embedding at the same
/// position (or zero for [`BaselineMode::Zeros`]); special rows are kept.
pub fn build_baseline(x: &TokenSequence, enc: &ReferenceEncoder, mode: BaselineMode) -> Result<EmbeddingSequence> {
    let mut base = enc.embed(x)?;
    let replacement = mode.token().map(|t| enc.token_embedding(t)).transpose()?;
    for i in x.regular_positions() {
        let row = match &replacement {
            Some(tok) => tok + enc.positional(i),
            None => nalgebra::DVector::zeros(enc.hidden()),
        };
        base.vectors.set_row(i, &row.transpose());
    }
    Ok(base)
}

/// Integrated gradients for one side through the in-process retriever.
///
/// The other side stays at its full embeddings.
pub fn integrated_gradients(
    retriever: &ReferenceRetriever,
    q: &TokenSequence,
    d: &TokenSequence,
    target: Side,
    mode: BaselineMode,
    steps: usize,
) -> Result<SaliencyVector> {
    let (own, other, other_side) = match target {
        Side::Query => (q, d, Side::Document),
        Side::Document => (d, q, Side::Query),
    };
    if own.regular_positions().is_empty() {
        return Err(Error::Precondition("target side has no regular tokens".into()));
    }
    let enc = retriever.encoder(target);
    let input = enc.embed(own)?;
    let baseline = build_baseline(own, enc, mode)?;
    let companion = retriever.encoder(other_side).embed(other)?;
    let path = IgPath {
        side: target,
        input: &input,
        baseline: &baseline,
        mask: &own.attention_mask(),
        companion: &companion,
        companion_mask: &other.attention_mask(),
    };
    let mut sal = integrate(retriever, &path, steps)?;
    sal.baseline_mode = mode;
    Ok(sal)
}

/// Inputs of an IG run expressed directly as embeddings.
pub struct IgPath<'a> {
    pub side: Side,
    pub input: &'a EmbeddingSequence,
    pub baseline: &'a EmbeddingSequence,
    pub mask: &'a [bool],
    pub companion: &'a EmbeddingSequence,
    pub companion_mask: &'a [bool],
}

/// Integrates gradients along `baseline + t (input - baseline)` with the
/// trapezoidal rule over `steps` intervals and multiplies elementwise by
/// `input - baseline`, summing over the hidden dimension.
///
/// Works with any [`GradientOracle`], so remote encoders go through the
/// same code path.
pub fn integrate<G: GradientOracle + ?Sized>(oracle: &G, path: &IgPath<'_>, steps: usize) -> Result<SaliencyVector> {
    if steps < 1 {
        return Err(Error::InvalidSteps(steps));
    }
    let (n, h) = path.input.vectors.shape();
    if path.baseline.vectors.shape() != (n, h) {
        return Err(Error::Shape(format!(
            "baseline {:?} vs input {:?}",
            path.baseline.vectors.shape(),
            (n, h)
        )));
    }
    let diff = &path.input.vectors - &path.baseline.vectors;
    let companion = path.companion.to_rows();

    let mut accumulated = DMatrix::<f64>::zeros(n, h);
    let mut score_baseline = 0.0;
    let mut score_input = 0.0;
    for l in 0..=steps {
        let point = if l == steps {
            path.input.vectors.clone()
        } else {
            &path.baseline.vectors + &diff * (l as f64 / steps as f64)
        };
        let response = oracle.gradient(&GradientOracleRequest {
            side: path.side,
            embeddings: EmbeddingSequence { vectors: point }.to_rows(),
            mask: Some(path.mask.to_vec()),
            companion: companion.clone(),
            companion_mask: Some(path.companion_mask.to_vec()),
        })?;
        let grad = EmbeddingSequence::from_rows(&response.gradient)?.vectors;
        if grad.shape() != (n, h) {
            return Err(Error::Shape(format!("gradient {:?}, expected {:?}", grad.shape(), (n, h))));
        }
        let weight = if l == 0 || l == steps { 0.5 } else { 1.0 };
        accumulated += grad * weight;
        if l == 0 {
            score_baseline = response.score;
        }
        if l == steps {
            score_input = response.score;
        }
    }
    accumulated /= steps as f64;

    let scores = (0..n)
        .map(|i| diff.row(i).dot(&accumulated.row(i)))
        .collect::<Vec<f64>>();
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(SaliencyVector {
        scores,
        target: path.side,
        baseline_mode: BaselineMode::default(),
        steps,
        score_input,
        score_baseline,
    })
}

/// `sum(saliency) / (s_full - s_baseline)`; 1 means the attributions
/// account for the whole score gap.
pub fn additivity_ratio(saliency: &SaliencyVector, s_full: f64, s_baseline: f64) -> Result<f64> {
    let gap = s_full - s_baseline;
    if gap.abs() < 1e-12 {
        return Err(Error::DegenerateDenominator(gap));
    }
    Ok(saliency.total() / gap)
}
