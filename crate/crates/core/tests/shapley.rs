mod common;

use common::permutation_shapley;
use proptest::prelude::*;
use ragaudit::gateway::MockGame;
use ragaudit::shapley::{
    attribute, evaluate_pool, exact_shapley, kernel_shap, mc_shap, mc_shap_on_pool, sample_coalitions, Coalition,
    FnOracle, McPairing, Method, SamplerConfig, SamplingStrategy, SetValueOracle,
};
use ragaudit::Error;

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn full_enumeration(k: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        strategy: SamplingStrategy::Complementary,
        perturbations: 1 << k,
        mc_samples: 1,
        mc_sample_size: 1 << k,
        pairing: McPairing::Paired,
        seed,
        distinct: true,
    }
}

#[test]
fn exact_matches_permutation_average_on_mock_games() {
    for seed in 0..30 {
        let k = 1 + (seed as usize % 6);
        let game = MockGame::random(k, 3, seed);
        let exact = exact_shapley(&game).unwrap();
        let reference = permutation_shapley(&game);
        assert!(max_abs_diff(&exact.entries, &reference) < 1e-9, "seed {seed}");
    }
}

#[test]
fn kernel_shap_on_every_subset_is_exact() {
    for seed in 0..10 {
        let game = MockGame::random(5, 2, 100 + seed);
        let exact = exact_shapley(&game).unwrap();
        let pool = evaluate_pool(&game, &full_enumeration(5, seed)).unwrap();
        assert_eq!(pool.len(), 32);
        let fit = kernel_shap(&pool, 5).unwrap();
        assert!(max_abs_diff(&exact.entries, &fit.entries) < 1e-6, "seed {seed}");
    }
}

#[test]
fn null_player_and_symmetry_axioms() {
    // Player 2 never matters; players 0 and 1 are interchangeable.
    let game = FnOracle::new(4, 1, |c: Coalition| {
        let pair = (c.contains(0) as u8 + c.contains(1) as u8) as f64;
        vec![pair * pair + 3.0 * c.contains(3) as u8 as f64]
    });
    let phi = exact_shapley(&game).unwrap();
    assert!(phi.get(2, 0).abs() < 1e-12);
    assert!((phi.get(0, 0) - phi.get(1, 0)).abs() < 1e-12);
    assert!((phi.get(3, 0) - 3.0).abs() < 1e-12);
}

#[test]
fn sampled_pool_always_has_anchors_first() {
    for strategy in [SamplingStrategy::Uniform, SamplingStrategy::Complementary] {
        let cfg = SamplerConfig {
            strategy,
            perturbations: 12,
            pairing: McPairing::Random,
            mc_sample_size: 8,
            ..SamplerConfig::default()
        };
        let pool = sample_coalitions(&cfg, 6).unwrap();
        assert_eq!(pool.len(), 12);
        assert_eq!(pool[0], Coalition::EMPTY);
        assert_eq!(pool[1], Coalition::full(6));
    }
}

#[test]
fn complementary_pool_lists_pairs() {
    let cfg = SamplerConfig { perturbations: 16, seed: 9, ..SamplerConfig::default() };
    let pool = sample_coalitions(&cfg, 7).unwrap();
    for pair in pool[2..].chunks(2) {
        assert_eq!(pair[0].complement(7), pair[1]);
    }
}

#[test]
fn method_dispatch_is_seed_deterministic() {
    let game = MockGame::random(6, 2, 5);
    let cfg = SamplerConfig { perturbations: 24, mc_samples: 20, mc_sample_size: 16, seed: 11, ..Default::default() };
    for method in [Method::Exact, Method::Kshap, Method::Mc, Method::Pmc] {
        let a = attribute(&game, method, &cfg).unwrap();
        let b = attribute(&game, method, &cfg).unwrap();
        assert_eq!(a, b, "{method:?}");
        assert!(a.efficiency_error() < 1e-9, "{method:?}");
    }
}

#[test]
fn mc_on_shared_pool_matches_mc_shap() {
    let game = MockGame::random(5, 2, 17);
    let cfg = SamplerConfig { perturbations: 20, mc_samples: 50, mc_sample_size: 15, seed: 3, ..Default::default() };
    let pool = evaluate_pool(&game, &cfg).unwrap();
    assert_eq!(mc_shap_on_pool(&pool, 5, &cfg).unwrap(), mc_shap(&game, &cfg).unwrap());
}

#[test]
fn oracle_failures_propagate_with_coalition() {
    let game = FnOracle::new(3, 1, |c: Coalition| if c.len() == 2 { vec![f64::NAN] } else { vec![1.0] });
    match exact_shapley(&game) {
        Err(Error::Oracle { coalition, .. }) => assert_eq!(coalition.len(), 2),
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn efficiency_holds_for_every_method(seed in 0u64..10_000, k in 2usize..7, m in 1usize..4) {
        let game = MockGame::random(k, m, seed);
        let n = (1usize << k).min(20) & !1;
        let cfg = SamplerConfig {
            perturbations: n,
            mc_samples: 10,
            mc_sample_size: n.clamp(2, 12),
            seed,
            ..Default::default()
        };
        let full = game.evaluate(Coalition::full(k)).unwrap();
        let empty = game.evaluate(Coalition::EMPTY).unwrap();
        for method in [Method::Exact, Method::Kshap, Method::Pmc] {
            match attribute(&game, method, &cfg) {
                Ok(phi) => {
                    for j in 0..m {
                        let sum: f64 = (0..k).map(|i| phi.get(i, j)).sum();
                        prop_assert!((sum - (full[j] - empty[j])).abs() < 1e-9);
                    }
                }
                // Small pools can leave players indistinguishable.
                Err(Error::RankDeficient { .. }) | Err(Error::McExhausted { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }

    #[test]
    fn additive_games_are_recovered_by_exact(weights in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
        let k = weights.len();
        let w = weights.clone();
        let game = FnOracle::new(k, 1, move |c: Coalition| vec![c.members().iter().map(|&i| w[i]).sum()]);
        let phi = exact_shapley(&game).unwrap();
        for (i, wi) in weights.iter().enumerate() {
            prop_assert!((phi.get(i, 0) - wi).abs() < 1e-10);
        }
    }

    #[test]
    fn distinct_pools_have_no_repeats(seed in 0u64..1000, k in 3usize..9) {
        let n = ((1usize << k) / 2).max(4) & !1;
        let cfg = SamplerConfig { perturbations: n, mc_sample_size: n, seed, ..Default::default() };
        let pool = sample_coalitions(&cfg, k).unwrap();
        let set: std::collections::HashSet<_> = pool.iter().collect();
        prop_assert_eq!(set.len(), pool.len());
    }
}
