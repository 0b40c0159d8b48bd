//! Generator rankings, rank-biased overlap, WARG, Spearman correlation and
//! the wasted-retrieval / noise-distraction classifiers.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The default persistence grid.
pub const DEFAULT_P_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// A permutation of document indices, most relevant first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ranking(Vec<usize>);

impl Ranking {
    /// Checks that `items` is a permutation of `0..items.len()`.
    pub fn new(items: Vec<usize>) -> Result<Self> {
        let k = items.len();
        let mut seen = vec![false; k];
        for &i in &items {
            if i >= k || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Precondition(format!("{items:?} is not a permutation of 0..{k}")));
            }
        }
        Ok(Ranking(items))
    }

    /// The retriever order `0, 1, ..., k-1`.
    pub fn identity(k: usize) -> Self {
        Ranking((0..k).collect())
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Position of `item` in this ranking.
    pub fn position(&self, item: usize) -> Option<usize> {
        self.0.iter().position(|&x| x == item)
    }
}

/// What the generator ranking sorts by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankBasis {
    /// Signed mean attribution; a strongly negative document ranks last.
    #[default]
    Signed,
    /// Magnitude of the mean attribution, regardless of direction.
    Absolute,
}

impl RankBasis {
    /// The values to rank and correlate under this basis.
    pub fn apply(self, importances: &[f64]) -> Vec<f64> {
        match self {
            RankBasis::Signed => importances.to_vec(),
            RankBasis::Absolute => importances.iter().map(|x| x.abs()).collect(),
        }
    }

    pub fn is_signed(&self) -> bool {
        *self == RankBasis::Signed
    }
}

/// Orders documents by descending importance. Ties keep retriever order.
pub fn rank_generator(importances: &[f64]) -> Result<Ranking> {
    if importances.is_empty() {
        return Err(Error::EmptyInput("importances"));
    }
    if let Some(index) = importances.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut order: Vec<usize> = (0..importances.len()).collect();
    order.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]));
    Ok(Ranking(order))
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidPersistence(p))
    }
}

/// Rank-biased overlap truncated at depth `k`:
/// `(1 - p) Σ_{d=1..k} p^(d-1) |a[..d] ∩ b[..d]| / d`.
pub fn rbo(a: &Ranking, b: &Ranking, p: f64) -> Result<f64> {
    check_p(p)?;
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let mut seen_a = HashSet::new();
    let mut seen_b = HashSet::new();
    let mut overlap = 0usize;
    let mut sum = 0.0;
    let mut weight = 1.0;
    for (d, (&x, &y)) in a.items().iter().zip(b.items()).enumerate() {
        if x == y {
            overlap += 1;
        } else {
            overlap += usize::from(seen_b.contains(&x)) + usize::from(seen_a.contains(&y));
        }
        seen_a.insert(x);
        seen_b.insert(y);
        sum += weight * overlap as f64 / (d + 1) as f64;
        weight *= p;
    }
    Ok((1.0 - p) * sum)
}

/// `1 - rbo(r_ret, r_gen, p)`.
pub fn warg(r_ret: &Ranking, r_gen: &Ranking, p: f64) -> Result<f64> {
    Ok(1.0 - rbo(r_ret, r_gen, p)?)
}

/// WARG at every persistence in `grid`, keyed by the formatted value.
pub fn warg_sweep(r_ret: &Ranking, r_gen: &Ranking, grid: &[f64]) -> Result<BTreeMap<String, f64>> {
    grid.iter().map(|&p| Ok((format_p(p), warg(r_ret, r_gen, p)?))).collect()
}

/// Canonical map key for a persistence value.
pub fn format_p(p: f64) -> String {
    let s = format!("{p:.6}");
    let s = s.trim_end_matches('0');
    if s.ends_with('.') { format!("{s}0") } else { s.to_string() }
}

/// Average ranks (0-based) with ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation between each document's retriever rank and its
/// rank by descending importance. `1` means the generator ranks documents
/// exactly as the retriever does.
pub fn spearman(r_ret: &Ranking, importances: &[f64]) -> Result<f64> {
    let k = r_ret.len();
    if k < 2 {
        return Err(Error::InsufficientData { required: 2, found: k });
    }
    if importances.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: importances.len() });
    }
    if let Some(index) = importances.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut ret_rank = vec![0.0; k];
    for (pos, &doc) in r_ret.items().iter().enumerate() {
        ret_rank[doc] = pos as f64;
    }
    let negated: Vec<f64> = importances.iter().map(|x| -x).collect();
    let gen_rank = average_ranks(&negated);
    pearson(&ret_rank, &gen_rank).ok_or(Error::ZeroVariance("importances"))
}

/// Rank-depth thresholds for the failure classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureThresholds {
    /// Wasted retrieval when the retriever's top document sits deeper than
    /// this in the generator ranking.
    pub wasted_retrieval: usize,
    /// Noise distraction when the generator's top document sits deeper than
    /// this in the retriever ranking.
    pub noise_distraction: usize,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        FailureThresholds { wasted_retrieval: 2, noise_distraction: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureFlags {
    pub wasted_retrieval: bool,
    pub noise_distraction: bool,
}

/// Classifies a ranking pair with the default thresholds.
pub fn classify_failures(r_ret: &Ranking, r_gen: &Ranking) -> FailureFlags {
    classify_failures_with(r_ret, r_gen, FailureThresholds::default())
}

pub fn classify_failures_with(r_ret: &Ranking, r_gen: &Ranking, t: FailureThresholds) -> FailureFlags {
    let (Some(&ret_top), Some(&gen_top)) = (r_ret.items().first(), r_gen.items().first()) else {
        return FailureFlags { wasted_retrieval: false, noise_distraction: false };
    };
    FailureFlags {
        wasted_retrieval: r_gen.position(ret_top).is_some_and(|p| p > t.wasted_retrieval),
        noise_distraction: r_ret.position(gen_top).is_some_and(|p| p > t.noise_distraction),
    }
}

/// Per-query alignment between retriever and generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub warg_by_p: BTreeMap<String, f64>,
    /// `None` when undefined; see `spearman_undefined`.
    pub spearman: Option<f64>,
    /// Reason code when `spearman` is `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_undefined: Option<String>,
    pub wasted_retrieval: bool,
    pub noise_distraction: bool,
    pub retriever_ranking: Ranking,
    pub generator_ranking: Ranking,
}

impl AlignmentRecord {
    /// Computes every alignment metric from retriever order and generator
    /// importances.
    pub fn compute(r_ret: &Ranking, importances: &[f64], grid: &[f64], thresholds: FailureThresholds) -> Result<Self> {
        let r_gen = rank_generator(importances)?;
        let flags = classify_failures_with(r_ret, &r_gen, thresholds);
        let (spearman, spearman_undefined) = match spearman(r_ret, importances) {
            Ok(rho) => (Some(rho), None),
            Err(Error::ZeroVariance(_)) => (None, Some("zero_variance".to_string())),
            Err(Error::InsufficientData { .. }) => (None, Some("insufficient_data".to_string())),
            Err(e) => return Err(e),
        };
        Ok(AlignmentRecord {
            warg_by_p: warg_sweep(r_ret, &r_gen, grid)?,
            spearman,
            spearman_undefined,
            wasted_retrieval: flags.wasted_retrieval,
            noise_distraction: flags.noise_distraction,
            retriever_ranking: r_ret.clone(),
            generator_ranking: r_gen,
        })
    }
}

/// Percentages of records with each failure flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRates {
    pub wasted_retrieval: f64,
    pub noise_distraction: f64,
    pub queries: usize,
}

impl FailureRates {
    /// Percentages rounded to one decimal place.
    pub fn rounded(&self) -> FailureRates {
        FailureRates {
            wasted_retrieval: round1(self.wasted_retrieval),
            noise_distraction: round1(self.noise_distraction),
            queries: self.queries,
        }
    }
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn failure_rates(records: &[AlignmentRecord]) -> Result<FailureRates> {
    if records.is_empty() {
        return Err(Error::EmptyInput("alignment records"));
    }
    let n = records.len() as f64;
    let pct = |count: usize| 100.0 * count as f64 / n;
    Ok(FailureRates {
        wasted_retrieval: pct(records.iter().filter(|r| r.wasted_retrieval).count()),
        noise_distraction: pct(records.iter().filter(|r| r.noise_distraction).count()),
        queries: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(v: &[usize]) -> Ranking {
        Ranking::new(v.to_vec()).unwrap()
    }

    #[test]
    fn generator_ranking_examples() {
        assert_eq!(rank_generator(&[0.1, 0.5, 0.2]).unwrap(), r(&[1, 2, 0]));
        assert_eq!(rank_generator(&[0.3; 4]).unwrap(), r(&[0, 1, 2, 3]));
        assert_eq!(rank_generator(&[-0.2, 0.0, -0.5]).unwrap(), r(&[1, 0, 2]));
        assert!(matches!(rank_generator(&[0.1, f64::NAN]), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn rbo_examples() {
        let id = Ranking::identity(10);
        assert!((rbo(&id, &id, 0.9).unwrap() - 0.6513215599).abs() < 1e-10);
        assert!((rbo(&r(&[0, 1, 2]), &r(&[0, 2, 1]), 0.5).unwrap() - 0.75).abs() < 1e-15);
        assert!((rbo(&r(&[0, 1, 2]), &r(&[0, 2, 1]), 1e-6).unwrap() - 1.0).abs() < 1e-5);
        assert!(rbo(&r(&[0, 1, 2]), &r(&[1, 0, 2]), 1e-6).unwrap() < 1e-5);
        assert!(matches!(rbo(&id, &id, 1.0), Err(Error::InvalidPersistence(_))));
    }

    #[test]
    fn warg_identity_is_p_to_the_k() {
        let id = Ranking::identity(5);
        assert!((warg(&id, &id, 0.5).unwrap() - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn spearman_extremes() {
        let id = Ranking::identity(4);
        assert!((spearman(&id, &[4.0, 3.0, 2.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&id, &[1.0, 2.0, 3.0, 4.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(spearman(&id, &[1.0; 4]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn failure_examples() {
        let id = Ranking::identity(5);
        let f = classify_failures(&id, &r(&[1, 2, 4, 0, 3]));
        assert!(f.wasted_retrieval);
        assert!(!classify_failures(&id, &r(&[1, 0, 2, 3, 4])).noise_distraction);
        assert_eq!(classify_failures(&id, &id), FailureFlags { wasted_retrieval: false, noise_distraction: false });
    }

    #[test]
    fn p_keys_are_compact() {
        assert_eq!(format_p(0.5), "0.5");
        assert_eq!(format_p(0.75), "0.75");
        assert_eq!(format_p(1e-6), "0.000001");
    }
}
