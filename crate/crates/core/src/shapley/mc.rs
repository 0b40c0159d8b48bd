use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::coalition::EvaluatedCoalition;
use super::kernel::kernel_shap;
use super::matrix::AttributionMatrix;
use super::oracle::{evaluate_batch, SetValueOracle};
use super::sampling::{sample_coalitions, McPairing, SamplerConfig, SamplingStrategy};
use crate::error::{Error, Result};
use crate::parallel::parallel_map;

/// Redraws allowed per failed Monte-Carlo resample.
pub const MC_RETRIES: usize = 3;

/// Draws the perturbation pool, evaluates each distinct coalition once, and
/// averages `M` Kernel SHAP fits over size-`N'` resamples of the pool.
pub fn mc_shap<O: SetValueOracle + ?Sized>(
    oracle: &O,
    config: &SamplerConfig,
) -> Result<AttributionMatrix> {
    let k = oracle.arity();
    let pool = evaluate_pool(oracle, config)?;
    mc_shap_on_pool(&pool, k, config)
}

/// Samples and evaluates a pool as [`mc_shap`] would.
pub fn evaluate_pool<O: SetValueOracle + ?Sized>(
    oracle: &O,
    config: &SamplerConfig,
) -> Result<Vec<EvaluatedCoalition>> {
    let coalitions = sample_coalitions(config, oracle.arity())?;
    evaluate_batch(oracle, &coalitions)
}

/// Monte-Carlo aggregation over an already evaluated pool.
///
/// `pool` must be laid out as produced by [`super::sample_coalitions`]:
/// anchors at positions 0 and 1, then (for complementary pools) each draw
/// followed by its complement. Every resample keeps both anchors. Paired
/// resampling takes whole pairs; when `N' - 2` is odd the last slot holds
/// one member of a further random pair.
pub fn mc_shap_on_pool(
    pool: &[EvaluatedCoalition],
    k: usize,
    config: &SamplerConfig,
) -> Result<AttributionMatrix> {
    config.validate(k)?;
    if pool.len() != config.perturbations {
        return Err(Error::InvalidConfig(format!(
            "pool holds {} coalitions, expected {}",
            pool.len(),
            config.perturbations
        )));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let fits = parallel_map(config.mc_samples, workers, |sample| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(sample as u64 + 1);
        let mut last_err = None;
        for _ in 0..=MC_RETRIES {
            let picked = resample(&mut rng, pool, config);
            match kernel_shap(&picked, k) {
                Ok(fit) => return Ok(fit),
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::McExhausted {
            sample,
            attempts: MC_RETRIES + 1,
            source: Box::new(last_err.expect("at least one attempt")),
        })
    })?;
    AttributionMatrix::mean(&fits)
}

fn resample(rng: &mut ChaCha8Rng, pool: &[EvaluatedCoalition], config: &SamplerConfig) -> Vec<EvaluatedCoalition> {
    let target = config.mc_sample_size;
    let mut out: Vec<EvaluatedCoalition> = pool[..2].to_vec();
    let rest = &pool[2..];
    let need = target - 2;
    if need == 0 {
        return out;
    }
    match config.pairing {
        McPairing::Paired => {
            debug_assert_eq!(config.strategy, SamplingStrategy::Complementary);
            let pairs: Vec<&[EvaluatedCoalition]> = rest.chunks(2).collect();
            let whole = need / 2;
            let extra = need % 2;
            let chosen = index::sample(rng, pairs.len(), whole + extra);
            for (n, p) in chosen.iter().enumerate() {
                if n < whole {
                    out.extend_from_slice(pairs[p]);
                } else {
                    let member = pairs[p].choose(rng).expect("non-empty pair");
                    out.push(member.clone());
                }
            }
        }
        McPairing::Random => {
            for i in index::sample(rng, rest.len(), need) {
                out.push(rest[i].clone());
            }
        }
    }
    out
}
