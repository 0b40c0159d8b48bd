use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ragaudit::alignment::{
    classify_failures, failure_rates, rank_generator, rbo, spearman, warg, warg_sweep, AlignmentRecord,
    FailureThresholds, Ranking, DEFAULT_P_GRID,
};
use ragaudit::Error;

fn r(v: &[usize]) -> Ranking {
    Ranking::new(v.to_vec()).unwrap()
}

/// Truncated RBO recomputed from prefix set intersections.
fn brute_rbo(a: &[usize], b: &[usize], p: f64) -> f64 {
    let mut total = 0.0;
    for d in 1..=a.len() {
        let sa: HashSet<_> = a[..d].iter().collect();
        let sb: HashSet<_> = b[..d].iter().collect();
        total += p.powi(d as i32 - 1) * sa.intersection(&sb).count() as f64 / d as f64;
    }
    (1.0 - p) * total
}

/// Pearson correlation of rank vectors, ranks assigned by counting.
fn brute_spearman(r_ret: &[usize], importances: &[f64]) -> f64 {
    let k = importances.len();
    let mut x = vec![0.0; k];
    for (pos, &doc) in r_ret.iter().enumerate() {
        x[doc] = pos as f64;
    }
    let y: Vec<f64> = (0..k)
        .map(|i| {
            let greater = importances.iter().filter(|&&v| v > importances[i]).count() as f64;
            let equal = importances.iter().filter(|&&v| v == importances[i]).count() as f64;
            greater + (equal - 1.0) / 2.0
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&x), mean(&y));
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn identical_rankings_leave_only_the_tail() {
    for p in [0.5, 0.9] {
        for k in [3usize, 5, 10] {
            let id = Ranking::identity(k);
            assert!((warg(&id, &id, p).unwrap() - p.powi(k as i32)).abs() < 1e-12);
        }
    }
}

#[test]
fn swap_of_last_two_of_three() {
    let got = rbo(&r(&[0, 1, 2]), &r(&[0, 2, 1]), 0.5).unwrap();
    assert!((got - 0.75).abs() < 1e-12);
    assert!((brute_rbo(&[0, 1, 2], &[0, 2, 1], 0.5) - 0.75).abs() < 1e-12);
}

#[test]
fn reversed_rankings_are_far_apart() {
    let a = r(&[0, 1, 2, 3, 4]);
    let b = r(&[4, 3, 2, 1, 0]);
    assert!(warg(&a, &b, 0.9).unwrap() > warg(&a, &r(&[1, 0, 2, 3, 4]), 0.9).unwrap());
}

#[test]
fn persistence_outside_unit_interval_rejected() {
    let id = Ranking::identity(3);
    for p in [0.0, 1.0, -0.1, 1.5] {
        assert!(matches!(rbo(&id, &id, p), Err(Error::InvalidPersistence(_))));
    }
}

#[test]
fn sweep_keys_cover_default_grid() {
    let id = Ranking::identity(4);
    let sweep = warg_sweep(&id, &r(&[3, 2, 1, 0]), &DEFAULT_P_GRID).unwrap();
    let keys: Vec<&str> = sweep.keys().map(String::as_str).collect();
    assert_eq!(keys, ["0.5", "0.6", "0.7", "0.8", "0.9"]);
}

#[test]
fn classifier_boundaries_around_depth_two() {
    let ret = Ranking::identity(6);
    // Retriever's top document at generator position 2 is fine, 3 is not.
    let cases = [
        (vec![0, 1, 2, 3, 4, 5], false, false),
        (vec![1, 0, 2, 3, 4, 5], false, false),
        (vec![1, 2, 0, 3, 4, 5], false, false),
        (vec![1, 2, 3, 0, 4, 5], true, false),
        (vec![2, 1, 0, 3, 4, 5], false, false),
        (vec![3, 1, 0, 2, 4, 5], false, true),
        (vec![3, 1, 2, 0, 4, 5], true, true),
        (vec![5, 4, 3, 2, 1, 0], true, true),
    ];
    for (gen, wasted, noise) in cases {
        let flags = classify_failures(&ret, &r(&gen));
        assert_eq!((flags.wasted_retrieval, flags.noise_distraction), (wasted, noise), "{gen:?}");
    }
}

#[test]
fn failure_rate_percentages() {
    let ret = Ranking::identity(4);
    let records: Vec<AlignmentRecord> = [
        [4.0, 3.0, 2.0, 1.0],
        [0.0, 0.1, 0.2, 9.0],
        [0.0, 1.0, 2.0, 3.0],
    ]
    .iter()
    .map(|imp| AlignmentRecord::compute(&ret, imp, &DEFAULT_P_GRID, FailureThresholds::default()).unwrap())
    .collect();
    let rates = failure_rates(&records).unwrap();
    assert_eq!(rates.queries, 3);
    assert!((rates.wasted_retrieval - 200.0 / 3.0).abs() < 1e-12);
    assert!((rates.noise_distraction - 200.0 / 3.0).abs() < 1e-12);
    assert_eq!(rates.rounded().wasted_retrieval, 66.7);
}

#[test]
fn spearman_undefined_for_constant_importances() {
    let rec = AlignmentRecord::compute(&Ranking::identity(3), &[1.0; 3], &DEFAULT_P_GRID, FailureThresholds::default())
        .unwrap();
    assert_eq!(rec.spearman, None);
    assert_eq!(rec.spearman_undefined.as_deref(), Some("zero_variance"));
}

#[test]
fn warg_in_unit_interval_for_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..1000 {
        let k = 1 + trial % 12;
        let mut a: Vec<usize> = (0..k).collect();
        let mut b = a.clone();
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        for p in DEFAULT_P_GRID {
            let w = warg(&r(&a), &r(&b), p).unwrap();
            assert!((0.0..=1.0).contains(&w));
        }
    }
}

fn permutation(k: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..k).collect::<Vec<usize>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn incremental_rbo_matches_prefix_sets(
        (a, b) in (1usize..13).prop_flat_map(|k| (permutation(k), permutation(k))),
        p in 0.01f64..0.99,
    ) {
        let fast = rbo(&r(&a), &r(&b), p).unwrap();
        prop_assert!((fast - brute_rbo(&a, &b, p)).abs() < 1e-12);
    }

    #[test]
    fn rbo_is_symmetric(
        (a, b) in (1usize..10).prop_flat_map(|k| (permutation(k), permutation(k))),
        p in 0.05f64..0.95,
    ) {
        prop_assert!((rbo(&r(&a), &r(&b), p).unwrap() - rbo(&r(&b), &r(&a), p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_counting_ranks(
        (ret, imp) in (2usize..10).prop_flat_map(|k| (permutation(k), proptest::collection::vec(0i32..5, k))),
    ) {
        let imp: Vec<f64> = imp.into_iter().map(f64::from).collect();
        match spearman(&r(&ret), &imp) {
            Ok(rho) => prop_assert!((rho - brute_spearman(&ret, &imp)).abs() < 1e-9),
            Err(Error::ZeroVariance(_)) => prop_assert!(imp.iter().all(|&v| v == imp[0])),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }

    #[test]
    fn generator_ranking_is_sorted(imp in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
        let ranking = rank_generator(&imp).unwrap();
        for w in ranking.items().windows(2) {
            prop_assert!(imp[w[0]] >= imp[w[1]]);
        }
    }
}

#[test]
fn absolute_basis_ranks_by_magnitude() {
    use ragaudit::alignment::RankBasis;
    let importances = [0.10, -0.54, 0.20];
    let signed = rank_generator(&RankBasis::Signed.apply(&importances)).unwrap();
    let absolute = rank_generator(&RankBasis::Absolute.apply(&importances)).unwrap();
    assert_eq!(signed.items(), &[2, 0, 1]);
    assert_eq!(absolute.items(), &[1, 2, 0]);
}
