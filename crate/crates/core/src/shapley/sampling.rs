use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coalition::{Coalition, MAX_PLAYERS};
use crate::error::{Error, Result};

/// Above this arity, distinct sampling switches from weighted enumeration
/// to rejection.
const ENUMERATE_DISTINCT_UP_TO: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Independent draws.
    Uniform,
    /// Draws emitted as `(S, D \ S)` pairs.
    Complementary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McPairing {
    /// Resamples keep complementary pairs together.
    Paired,
    /// Resamples ignore pair structure.
    Random,
}

/// Perturbation budget and Monte-Carlo resampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    /// Pool size `N`, including the empty and full anchors.
    pub perturbations: usize,
    /// Number of resamples `M`.
    pub mc_samples: usize,
    /// Resample size `N'`, including the anchors.
    pub mc_sample_size: usize,
    pub pairing: McPairing,
    pub seed: u64,
    /// Draw each coalition at most once.
    #[serde(default = "default_distinct")]
    pub distinct: bool,
}

fn default_distinct() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: SamplingStrategy::Complementary,
            perturbations: 20,
            mc_samples: 200,
            mc_sample_size: 15,
            pairing: McPairing::Paired,
            seed: 0,
            distinct: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if k == 0 {
            return bad("at least one player is required".into());
        }
        if k > MAX_PLAYERS {
            return bad(format!("arity {k} exceeds {MAX_PLAYERS}"));
        }
        let n = self.perturbations;
        let space = if k >= 63 { u64::MAX } else { 1u64 << k };
        if n < 2 || n as u64 > space {
            return bad(format!("perturbations {n} outside [2, 2^{k}]"));
        }
        if self.mc_samples < 1 {
            return bad("mc_samples must be at least 1".into());
        }
        if self.mc_sample_size < 2 || self.mc_sample_size > n {
            return bad(format!(
                "mc_sample_size {} outside [2, {n}]",
                self.mc_sample_size
            ));
        }
        if self.strategy == SamplingStrategy::Complementary && !n.is_multiple_of(2) {
            return bad(format!("complementary sampling needs an even budget, got {n}"));
        }
        if self.pairing == McPairing::Paired && self.strategy != SamplingStrategy::Complementary {
            return bad("paired resampling requires complementary sampling".into());
        }
        Ok(())
    }
}

/// Shapley kernel weight `(k-1) / (C(k,s) * s * (k-s))` for `0 < s < k`.
pub fn kernel_weight(k: usize, s: usize) -> f64 {
    debug_assert!(s > 0 && s < k);
    (k - 1) as f64 / (super::exact::binomial(k, s) * (s * (k - s)) as f64)
}

/// Draws a pool of `N` coalitions.
///
/// The pool always starts with the empty and full coalitions (the anchor
/// pair). Remaining coalitions have their size drawn in proportion to the
/// total kernel mass of that size, `(k-1)/(s(k-s))`, and members drawn
/// uniformly. Complementary pools list each draw directly followed by its
/// complement.
pub fn sample_coalitions(config: &SamplerConfig, k: usize) -> Result<Vec<Coalition>> {
    config.validate(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let full = Coalition::full(k);
    let mut pool = vec![Coalition::EMPTY, full];
    let complementary = config.strategy == SamplingStrategy::Complementary;
    let remaining = config.perturbations - 2;
    if remaining == 0 {
        return Ok(pool);
    }

    if config.distinct && k <= ENUMERATE_DISTINCT_UP_TO {
        let picks = weighted_distinct(&mut rng, k, complementary, if complementary {
            remaining / 2
        } else {
            remaining
        });
        for c in picks {
            pool.push(c);
            if complementary {
                pool.push(c.complement(k));
            }
        }
        return Ok(pool);
    }

    let size_cdf = size_cdf(k);
    let mut seen: HashSet<Coalition> = pool.iter().copied().collect();
    while pool.len() < config.perturbations {
        let c = draw(&mut rng, k, &size_cdf);
        if config.distinct && seen.contains(&c) {
            continue;
        }
        pool.push(c);
        seen.insert(c);
        if complementary {
            let comp = c.complement(k);
            pool.push(comp);
            seen.insert(comp);
        }
    }
    Ok(pool)
}

fn size_cdf(k: usize) -> Vec<f64> {
    let mass: Vec<f64> = (1..k).map(|s| 1.0 / (s * (k - s)) as f64).collect();
    let total: f64 = mass.iter().sum();
    let mut acc = 0.0;
    mass.iter()
        .map(|m| {
            acc += m / total;
            acc
        })
        .collect()
}

fn draw(rng: &mut ChaCha8Rng, k: usize, size_cdf: &[f64]) -> Coalition {
    let u: f64 = rng.random();
    let size = 1 + size_cdf.iter().position(|&c| u < c).unwrap_or(size_cdf.len() - 1);
    let mut mask = 0u64;
    for i in index::sample(rng, k, size) {
        mask |= 1 << i;
    }
    Coalition::from_mask(mask)
}

/// Weighted sampling without replacement over every non-anchor coalition
/// (or every complementary pair), each weighted by its per-set kernel
/// weight. Uses exponential keys so the result equals sequential draws.
fn weighted_distinct(rng: &mut ChaCha8Rng, k: usize, pairs: bool, count: usize) -> Vec<Coalition> {
    let full = Coalition::full(k).mask();
    let top_bit = 1u64 << (k - 1);
    let mut keyed: Vec<(f64, Coalition)> = (1..full)
        .filter(|&mask| !pairs || mask & top_bit == 0)
        .map(|mask| {
            let c = Coalition::from_mask(mask);
            let w = kernel_weight(k, c.len());
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w, c)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(count).map(|(_, c)| c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strategy: SamplingStrategy, n: usize) -> SamplerConfig {
        SamplerConfig {
            strategy,
            perturbations: n,
            mc_samples: 1,
            mc_sample_size: 2,
            pairing: McPairing::Random,
            seed: 11,
            distinct: true,
        }
    }

    #[test]
    fn complementary_pairs_partition() {
        let pool = sample_coalitions(&cfg(SamplingStrategy::Complementary, 4), 3).unwrap();
        assert_eq!(pool.len(), 4);
        for pair in pool.chunks(2) {
            assert_eq!(pair[0].mask() & pair[1].mask(), 0);
            assert_eq!(pair[0].mask() | pair[1].mask(), Coalition::full(3).mask());
        }
    }

    #[test]
    fn uniform_is_deterministic() {
        let mut c = cfg(SamplingStrategy::Uniform, 8);
        c.distinct = false;
        let a = sample_coalitions(&c, 3).unwrap();
        let b = sample_coalitions(&c, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn full_budget_enumerates_every_subset() {
        let pool = sample_coalitions(&cfg(SamplingStrategy::Complementary, 8), 3).unwrap();
        let mut masks: Vec<u64> = pool.iter().map(|c| c.mask()).collect();
        masks.sort();
        assert_eq!(masks, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn rejection_path_for_large_arity() {
        let pool = sample_coalitions(&cfg(SamplingStrategy::Complementary, 40), 20).unwrap();
        let distinct: HashSet<_> = pool.iter().collect();
        assert_eq!(distinct.len(), 40);
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(SamplingStrategy::Complementary, 5).validate(3).is_err());
        assert!(cfg(SamplingStrategy::Uniform, 9).validate(3).is_err());
        assert!(cfg(SamplingStrategy::Uniform, 1).validate(3).is_err());
        let mut c = cfg(SamplingStrategy::Uniform, 6);
        c.pairing = McPairing::Paired;
        assert!(c.validate(3).is_err());
        let mut c = cfg(SamplingStrategy::Uniform, 6);
        c.mc_sample_size = 7;
        assert!(c.validate(3).is_err());
        c.mc_sample_size = 6;
        c.mc_samples = 0;
        assert!(c.validate(3).is_err());
    }

    #[test]
    fn kernel_weights_symmetric() {
        for s in 1..5 {
            assert!((kernel_weight(5, s) - kernel_weight(5, 5 - s)).abs() < 1e-15);
        }
        assert!((kernel_weight(5, 1) - 4.0 / (5.0 * 4.0)).abs() < 1e-15);
    }
}
