use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faithfulness::{wilcoxon_signed_rank, Alternative};
use crate::gateway::MockGame;
use crate::parallel::parallel_map;
use crate::shapley::{
    evaluate_pool, exact_shapley, kernel_shap, mc_shap_on_pool, AttributionMatrix, McPairing, Method, SamplerConfig,
    SamplingStrategy,
};

fn default_methods() -> Vec<Method> {
    vec![Method::Kshap, Method::Mc, Method::Pmc]
}

/// Grid for comparing estimators against exact Shapley values on random
/// mock games.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_perturbations")]
    pub perturbations: Vec<usize>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: Vec<usize>,
    #[serde(default = "default_mc_sample_size")]
    pub mc_sample_size: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_k() -> usize {
    5
}
fn default_m() -> usize {
    3
}
fn default_instances() -> usize {
    100
}
fn default_perturbations() -> Vec<usize> {
    vec![20]
}
fn default_mc_samples() -> Vec<usize> {
    vec![10, 50, 200]
}
fn default_mc_sample_size() -> usize {
    15
}
fn default_repeats() -> usize {
    10
}
fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub sampling: String,
    pub n: usize,
    pub m: Option<usize>,
    pub n_prime: Option<usize>,
    pub mse_vs_exact: f64,
    pub variance_over_repeats: f64,
    pub wilcoxon_p_vs_kshap: Option<f64>,
    /// Per-instance MSE, kept for downstream tests.
    #[serde(skip)]
    pub per_instance_mse: Vec<f64>,
}

/// Seed of the pool for one instance and repeat.
pub fn pool_seed(seed: u64, instance: usize, repeat: usize) -> u64 {
    seed.wrapping_add(1_000_003u64.wrapping_mul(instance as u64)).wrapping_add(repeat as u64)
}

fn mse(a: &AttributionMatrix, b: &AttributionMatrix) -> f64 {
    let diffs: Vec<f64> = a
        .entries
        .iter()
        .flatten()
        .zip(b.entries.iter().flatten())
        .map(|(x, y)| (x - y).powi(2))
        .collect();
    diffs.iter().sum::<f64>() / diffs.len() as f64
}

fn entry_variance(estimates: &[AttributionMatrix]) -> f64 {
    let r = estimates.len() as f64;
    let first = &estimates[0];
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..first.k() {
        for j in 0..first.m() {
            let mean = estimates.iter().map(|e| e.entries[i][j]).sum::<f64>() / r;
            total += estimates.iter().map(|e| (e.entries[i][j] - mean).powi(2)).sum::<f64>() / (r - 1.0);
            count += 1.0;
        }
    }
    total / count
}

#[derive(Clone, Copy)]
struct Cell {
    method: Method,
    mc_samples: Option<usize>,
}

/// Runs the benchmark grid. Rows come in grid order: for each `N`, the
/// Kernel SHAP row, then each Monte-Carlo method for each `M`.
pub fn bench_shap(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.instances == 0 || config.k < 2 || config.m == 0 {
        return Err(Error::InvalidConfig("bench needs instances ≥ 1, k ≥ 2 and m ≥ 1".into()));
    }
    if config.repeats < 2 {
        return Err(Error::InvalidConfig("bench needs at least two repeats".into()));
    }
    if config.methods.contains(&Method::Exact) {
        return Err(Error::InvalidConfig("exact is the reference, not a bench method".into()));
    }
    let games: Vec<MockGame> = (0..config.instances)
        .map(|i| MockGame::random(config.k, config.m, config.seed.wrapping_add(i as u64)))
        .collect();
    let exact: Vec<AttributionMatrix> = games.iter().map(exact_shapley).collect::<Result<_>>()?;

    let mut cells = Vec::new();
    if config.methods.contains(&Method::Kshap) {
        cells.push(Cell { method: Method::Kshap, mc_samples: None });
    }
    for &m in &config.mc_samples {
        for &method in &config.methods {
            if matches!(method, Method::Mc | Method::Pmc) {
                cells.push(Cell { method, mc_samples: Some(m) });
            }
        }
    }

    let mut rows = Vec::new();
    for &n in &config.perturbations {
        let base = SamplerConfig {
            strategy: SamplingStrategy::Complementary,
            perturbations: n,
            mc_samples: 1,
            mc_sample_size: config.mc_sample_size.min(n),
            pairing: McPairing::Paired,
            seed: 0,
            distinct: true,
        };
        base.validate(config.k)?;
        // estimates[instance][repeat][cell]
        let estimates = parallel_map(games.len(), config.parallelism, |i| {
            (0..config.repeats)
                .map(|rep| {
                    let sampler = SamplerConfig { seed: pool_seed(config.seed, i, rep), ..base };
                    let pool = evaluate_pool(&games[i], &sampler)?;
                    cells
                        .iter()
                        .map(|cell| match (cell.method, cell.mc_samples) {
                            (Method::Kshap, _) => kernel_shap(&pool, config.k),
                            (method, Some(mc)) => {
                                let pairing = if method == Method::Pmc { McPairing::Paired } else { McPairing::Random };
                                mc_shap_on_pool(&pool, config.k, &SamplerConfig { mc_samples: mc, pairing, ..sampler })
                            }
                            _ => unreachable!("cells are built with valid combinations"),
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let kshap_mse: Option<Vec<f64>> = cells
            .iter()
            .position(|c| c.method == Method::Kshap)
            .map(|c| (0..games.len()).map(|i| mse(&estimates[i][0][c], &exact[i])).collect());

        for (c, cell) in cells.iter().enumerate() {
            let per_instance: Vec<f64> = (0..games.len()).map(|i| mse(&estimates[i][0][c], &exact[i])).collect();
            let variance = (0..games.len())
                .map(|i| {
                    let reps: Vec<AttributionMatrix> = estimates[i].iter().map(|r| r[c].clone()).collect();
                    entry_variance(&reps)
                })
                .sum::<f64>()
                / games.len() as f64;
            let wilcoxon = match (&kshap_mse, cell.method) {
                (Some(base), Method::Mc | Method::Pmc) => {
                    let deltas: Vec<f64> = base.iter().zip(&per_instance).map(|(b, x)| b - x).collect();
                    wilcoxon_signed_rank(&deltas, Alternative::Greater).ok()
                }
                _ => None,
            };
            let sampling = match cell.method {
                Method::Kshap => "complementary",
                Method::Mc => "complementary+random",
                _ => "complementary+paired",
            };
            rows.push(BenchRow {
                method: cell.method,
                sampling: sampling.into(),
                n,
                m: cell.mc_samples,
                n_prime: cell.mc_samples.map(|_| base.mc_sample_size),
                mse_vs_exact: per_instance.iter().sum::<f64>() / per_instance.len() as f64,
                variance_over_repeats: variance,
                wilcoxon_p_vs_kshap: wilcoxon,
                per_instance_mse: per_instance,
            });
        }
    }
    Ok(rows)
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Exact => "exact",
        Method::Kshap => "kshap",
        Method::Mc => "mc",
        Method::Pmc => "pmc",
    }
}

/// Writes rows as CSV.
pub fn bench_shap_csv<W: Write>(out: W, rows: &[BenchRow], repeats: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let variance = format!("variance_over_{repeats}_repeats");
    let header = ["method", "sampling", "N", "M", "N_prime", "mse_vs_exact", variance.as_str(), "wilcoxon_p_vs_kshap"];
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    let opt = |x: Option<usize>| x.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        w.write_record([
            method_name(r.method).to_string(),
            r.sampling.clone(),
            r.n.to_string(),
            opt(r.m),
            opt(r.n_prime),
            r.mse_vs_exact.to_string(),
            r.variance_over_repeats.to_string(),
            r.wilcoxon_p_vs_kshap.map_or_else(String::new, |p| p.to_string()),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
