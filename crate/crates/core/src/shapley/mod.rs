//! Shapley attribution over arbitrary set-value oracles: exact enumeration,
//! constrained Kernel SHAP, coalition samplers, and Monte-Carlo averaged
//! Kernel SHAP.

mod coalition;
mod exact;
mod kernel;
mod matrix;
mod mc;
mod oracle;
mod sampling;

pub use coalition::{Coalition, EvaluatedCoalition, MAX_PLAYERS};
pub use exact::{exact_shapley, exact_shapley_capped, DEFAULT_ENUMERATION_CAP};
pub use kernel::{kernel_shap, CONDITION_FALLBACK};
pub use matrix::AttributionMatrix;
pub use mc::{evaluate_pool, mc_shap, mc_shap_on_pool, MC_RETRIES};
pub use oracle::{evaluate_batch, FnOracle, SetValueOracle};
pub use sampling::{kernel_weight, sample_coalitions, McPairing, SamplerConfig, SamplingStrategy};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Which estimator to run for a set-value oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Exhaustive enumeration.
    Exact,
    /// One Kernel SHAP fit on the sampled pool.
    Kshap,
    /// Monte-Carlo averaged Kernel SHAP, resamples ignore pairs.
    Mc,
    /// Monte-Carlo averaged Kernel SHAP over complementary pairs.
    Pmc,
}

/// Dispatches to the estimator selected by `method`.
///
/// `Mc` overrides the pairing to random; `Pmc` forces complementary
/// sampling with paired resamples.
pub fn attribute<O: SetValueOracle + ?Sized>(
    oracle: &O,
    method: Method,
    sampler: &SamplerConfig,
) -> Result<AttributionMatrix> {
    match method {
        Method::Exact => exact_shapley(oracle),
        Method::Kshap => {
            let pool = evaluate_pool(oracle, sampler)?;
            kernel_shap(&pool, oracle.arity())
        }
        Method::Mc => {
            let cfg = SamplerConfig { pairing: McPairing::Random, ..*sampler };
            mc_shap(oracle, &cfg)
        }
        Method::Pmc => {
            let cfg = SamplerConfig {
                strategy: SamplingStrategy::Complementary,
                pairing: McPairing::Paired,
                ..*sampler
            };
            mc_shap(oracle, &cfg)
        }
    }
}
