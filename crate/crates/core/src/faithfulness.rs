//! Perturbation curves, the AIPC faithfulness score, and the evaluation
//! statistics: percentile bootstrap intervals and the paired Wilcoxon
//! signed-rank test.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::alignment::average_ranks;
use crate::error::{Error, Result};
use crate::gateway::{forced_continuation_logprobs, LanguageModel};
use crate::generator::{create_prompt, PromptTemplate};
use crate::retriever::{split_words, score, ReferenceRetriever, Side, TokenSequence, UNK};
use crate::shapley::{Coalition, SetValueOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Most relevant first.
    Morf,
    /// Least relevant first.
    Lerf,
}

/// An input whose positions can be masked and re-scored.
///
/// Masking a position twice is the same as masking it once.
pub trait MaskableScorer {
    /// Number of maskable positions.
    fn positions(&self) -> usize;

    /// Score with the given positions masked.
    fn score(&self, masked: &[usize]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub direction: Direction,
    /// Scores after masking `0..=n` positions.
    pub values: Vec<f64>,
    /// The unmasked score, equal to `values[0]`.
    pub reference: f64,
    /// Positions in masking order.
    pub order: Vec<usize>,
}

/// Masking order: descending saliency for MoRF, ascending for LeRF, ties
/// by position.
pub fn masking_order(saliency: &[f64], direction: Direction) -> Vec<usize> {
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    match direction {
        Direction::Morf => order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b))),
        Direction::Lerf => order.sort_by(|&a, &b| saliency[a].total_cmp(&saliency[b]).then(a.cmp(&b))),
    }
    order
}

/// Scores the input with `0, 1, ..., n` positions masked in saliency order.
pub fn perturbation_curve<S: MaskableScorer + ?Sized>(
    scorer: &S,
    saliency: &[f64],
    direction: Direction,
) -> Result<PerturbationCurve> {
    let n = scorer.positions();
    if saliency.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: saliency.len() });
    }
    if let Some(index) = saliency.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let order = masking_order(saliency, direction);
    let values = (0..=n)
        .map(|level| {
            scorer
                .score(&order[..level])
                .map_err(|e| Error::Scorer { level, source: Box::new(e) })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PerturbationCurve { direction, reference: values[0], values, order })
}

fn trapezoid_gap(values: &[f64], reference: f64) -> f64 {
    values
        .windows(2)
        .map(|w| 0.5 * ((w[0] - reference) + (w[1] - reference)))
        .sum()
}

/// `(|A_MoRF| - |A_LeRF|) / (n |reference - fully masked|)`, where each
/// area is the trapezoidal area between the curve and the reference.
pub fn aipc(morf: &PerturbationCurve, lerf: &PerturbationCurve) -> Result<f64> {
    if morf.values.len() != lerf.values.len() {
        return Err(Error::DimensionMismatch { expected: morf.values.len(), found: lerf.values.len() });
    }
    if morf.values.len() < 2 {
        return Err(Error::InsufficientData { required: 2, found: morf.values.len() });
    }
    if morf.reference != lerf.reference {
        return Err(Error::Precondition("curves have different references".into()));
    }
    let n = (morf.values.len() - 1) as f64;
    let gap = (morf.reference - morf.values[morf.values.len() - 1]).abs();
    if gap < 1e-12 {
        return Err(Error::DegenerateDenominator(gap));
    }
    let a_morf = trapezoid_gap(&morf.values, morf.reference).abs();
    let a_lerf = trapezoid_gap(&lerf.values, lerf.reference).abs();
    Ok((a_morf - a_lerf) / (n * gap))
}

/// AIPC of one input under `saliency`, with both curves.
pub fn aipc_for<S: MaskableScorer + ?Sized>(
    scorer: &S,
    saliency: &[f64],
) -> Result<(f64, PerturbationCurve, PerturbationCurve)> {
    let morf = perturbation_curve(scorer, saliency, Direction::Morf)?;
    let lerf = perturbation_curve(scorer, saliency, Direction::Lerf)?;
    Ok((aipc(&morf, &lerf)?, morf, lerf))
}

/// Writes `level,morf_value,lerf_value` rows.
pub fn write_curves_csv<W: Write>(out: W, morf: &PerturbationCurve, lerf: &PerturbationCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["level", "morf_value", "lerf_value"]).map_err(csv_err)?;
    for (level, (m, l)) in morf.values.iter().zip(&lerf.values).enumerate() {
        w.write_record([level.to_string(), m.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Aggregate faithfulness over many inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipcSummary {
    pub mean_aipc: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub level: f64,
}

impl AipcSummary {
    pub fn from_values(values: &[f64], b: usize, level: f64, seed: u64) -> Result<Self> {
        let (ci_lower, ci_upper) = bootstrap_ci(values, b, level, seed)?;
        Ok(AipcSummary { mean_aipc: mean(values), ci_lower, ci_upper, b, level })
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of the mean from `b` seeded resamples.
pub fn bootstrap_ci(values: &[f64], b: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("bootstrap values"));
    }
    if b == 0 {
        return Err(Error::InvalidConfig("bootstrap needs at least one resample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level {level} must lie in (0, 1)")));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..b)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&means, alpha), quantile(&means, 1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Deltas tend to be positive.
    Greater,
    /// Deltas tend to be negative.
    Less,
}

/// Minimum number of nonzero deltas for the test.
pub const WILCOXON_MIN_N: usize = 6;

/// One-sided paired Wilcoxon signed-rank test on `deltas` using the normal
/// approximation with tie and continuity corrections. Zero deltas are
/// dropped.
pub fn wilcoxon_signed_rank(deltas: &[f64], alternative: Alternative) -> Result<f64> {
    if let Some(index) = deltas.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n < WILCOXON_MIN_N {
        return Err(Error::InsufficientData { required: WILCOXON_MIN_N, found: n });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r + 1.0)
        .sum();
    let nf = n as f64;
    let expected = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if variance <= 0.0 {
        return Err(Error::ZeroVariance("signed ranks"));
    }
    let sd = variance.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(match alternative {
        Alternative::Greater => normal.sf((w_plus - expected - 0.5) / sd),
        Alternative::Less => normal.cdf((w_plus - expected + 0.5) / sd),
    })
}

/// Retriever-side scorer: masked tokens become `[unk]` and the pair is
/// re-scored. Positions index the target side's regular tokens.
pub struct RetrieverMaskScorer<'a> {
    pub retriever: &'a ReferenceRetriever,
    pub query: &'a TokenSequence,
    pub document: &'a TokenSequence,
    pub side: Side,
    regular: Vec<usize>,
}

impl<'a> RetrieverMaskScorer<'a> {
    pub fn new(retriever: &'a ReferenceRetriever, query: &'a TokenSequence, document: &'a TokenSequence, side: Side) -> Self {
        let regular = match side {
            Side::Query => query.regular_positions(),
            Side::Document => document.regular_positions(),
        };
        RetrieverMaskScorer { retriever, query, document, side, regular }
    }

    /// Restricts a full-sequence saliency vector to the maskable positions.
    pub fn restrict(&self, saliency: &[f64]) -> Vec<f64> {
        self.regular.iter().map(|&i| saliency[i]).collect()
    }
}

impl MaskableScorer for RetrieverMaskScorer<'_> {
    fn positions(&self) -> usize {
        self.regular.len()
    }

    fn score(&self, masked: &[usize]) -> Result<f64> {
        let positions: Vec<usize> = masked.iter().map(|&m| self.regular[m]).collect();
        let (q, d) = match self.side {
            Side::Query => (self.query.with_replaced(&positions, UNK), self.document.clone()),
            Side::Document => (self.query.clone(), self.document.with_replaced(&positions, UNK)),
        };
        score(&q, &d, &self.retriever.query, &self.retriever.context)
    }
}

/// Generator-side scorer over documents: masking a document removes it
/// from the prompt. The score is the mean value over answer tokens.
pub struct DocumentMaskScorer<'a, O: SetValueOracle + ?Sized> {
    pub oracle: &'a O,
}

impl<O: SetValueOracle + ?Sized> MaskableScorer for DocumentMaskScorer<'_, O> {
    fn positions(&self) -> usize {
        self.oracle.arity()
    }

    fn score(&self, masked: &[usize]) -> Result<f64> {
        let k = self.oracle.arity();
        let mut keep = Coalition::full(k);
        for &m in masked {
            keep = Coalition::from_mask(keep.mask() & !(1u64 << m));
        }
        Ok(mean(&self.oracle.evaluate(keep)?))
    }
}

/// Generator-side scorer over the words of one document: masking a word
/// deletes its text. The score is the mean forced probability of the
/// answer.
pub struct DocumentTokenScorer<'a, L: LanguageModel + ?Sized> {
    pub client: &'a L,
    pub template: &'a PromptTemplate,
    pub query: &'a str,
    pub documents: &'a [String],
    pub target: usize,
    pub answer: &'a [String],
    spans: Vec<(usize, usize)>,
}

impl<'a, L: LanguageModel + ?Sized> DocumentTokenScorer<'a, L> {
    pub fn new(
        client: &'a L,
        template: &'a PromptTemplate,
        query: &'a str,
        documents: &'a [String],
        target: usize,
        answer: &'a [String],
    ) -> Result<Self> {
        let doc = documents.get(target).ok_or(Error::EmptyInput("target document"))?;
        let spans = split_words(doc).into_iter().map(|(s, e, _)| (s, e)).collect();
        Ok(DocumentTokenScorer { client, template, query, documents, target, answer, spans })
    }
}

impl<L: LanguageModel + ?Sized> MaskableScorer for DocumentTokenScorer<'_, L> {
    fn positions(&self) -> usize {
        self.spans.len()
    }

    fn score(&self, masked: &[usize]) -> Result<f64> {
        let mut drop = vec![false; self.spans.len()];
        for &m in masked {
            drop[m] = true;
        }
        let text: String = self.documents[self.target]
            .chars()
            .enumerate()
            .filter(|(i, _)| !self.spans.iter().zip(&drop).any(|(&(s, e), &d)| d && *i >= s && *i < e))
            .map(|(_, c)| c)
            .collect();
        let docs: Vec<&str> = self
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| if i == self.target { text.as_str() } else { d.as_str() })
            .collect();
        let prompt = create_prompt(self.query, &docs, self.template)?.to_text();
        let lp = forced_continuation_logprobs(self.client, &prompt, self.answer)?;
        Ok(lp.iter().map(|v| v.exp()).sum::<f64>() / lp.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(Vec<f64>);

    impl MaskableScorer for Linear {
        fn positions(&self) -> usize {
            self.0.len()
        }
        fn score(&self, masked: &[usize]) -> Result<f64> {
            Ok(self.0.iter().enumerate().filter(|(i, _)| !masked.contains(i)).map(|(_, c)| c).sum())
        }
    }

    #[test]
    fn morf_order_for_two_tokens() {
        assert_eq!(masking_order(&[5.0, 1.0], Direction::Morf), vec![0, 1]);
        assert_eq!(masking_order(&[5.0, 1.0], Direction::Lerf), vec![1, 0]);
    }

    #[test]
    fn uniform_saliency_gives_zero_aipc() {
        let s = Linear(vec![1.0, 2.0, 3.0]);
        let (a, morf, lerf) = aipc_for(&s, &[0.5; 3]).unwrap();
        assert_eq!(morf.values, lerf.values);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn linear_curve_is_partial_sums() {
        let s = Linear(vec![3.0, 1.0, 2.0]);
        let c = perturbation_curve(&s, &[3.0, 1.0, 2.0], Direction::Morf).unwrap();
        assert_eq!(c.values, vec![6.0, 3.0, 1.0, 0.0]);
        assert_eq!(c.reference, 6.0);
    }

    #[test]
    fn swapping_curves_negates() {
        let s = Linear(vec![3.0, 1.0, 2.0, 0.5]);
        let (a, morf, lerf) = aipc_for(&s, &[3.0, 1.0, 2.0, 0.5]).unwrap();
        assert!(a > 0.0);
        assert_eq!(aipc(&lerf, &morf).unwrap(), -a);
    }

    #[test]
    fn degenerate_gap_is_an_error() {
        let s = Linear(vec![1.0, -1.0]);
        assert!(matches!(aipc_for(&s, &[1.0, 0.0]), Err(Error::DegenerateDenominator(_))));
    }

    #[test]
    fn constant_bootstrap_interval() {
        assert_eq!(bootstrap_ci(&[2.5; 7], 100, 0.95, 1).unwrap(), (2.5, 2.5));
        assert!(matches!(bootstrap_ci(&[], 100, 0.95, 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn wilcoxon_extremes() {
        let all: Vec<f64> = (1..=20).map(f64::from).collect();
        assert!(wilcoxon_signed_rank(&all, Alternative::Greater).unwrap() < 0.001);
        let sym: Vec<f64> = (1..=10).flat_map(|i| [f64::from(i), -f64::from(i)]).collect();
        assert!((wilcoxon_signed_rank(&sym, Alternative::Greater).unwrap() - 0.5).abs() < 0.1);
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0, 0.0, 2.0, 3.0, 4.0, 5.0], Alternative::Greater),
            Err(Error::InsufficientData { required: 6, found: 5 })
        ));
    }
}
