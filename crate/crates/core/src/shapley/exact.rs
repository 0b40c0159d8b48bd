use super::coalition::{Coalition, MAX_PLAYERS};
use super::matrix::AttributionMatrix;
use super::oracle::{evaluate_batch, SetValueOracle};
use crate::error::{Error, Result};

/// Default upper bound on `k` for exhaustive enumeration (4096 oracle calls).
pub const DEFAULT_ENUMERATION_CAP: usize = 12;

/// Exact Shapley values by enumerating every coalition, with the default cap.
pub fn exact_shapley<O: SetValueOracle + ?Sized>(oracle: &O) -> Result<AttributionMatrix> {
    exact_shapley_capped(oracle, DEFAULT_ENUMERATION_CAP)
}

/// Exact Shapley values in subset form:
///
/// ```text
/// beta[i][j] = sum over S ⊆ D \ {i} of |S|! (k - |S| - 1)! / k! * (v_j(S ∪ {i}) - v_j(S))
/// ```
///
/// The oracle is called once per subset of the `k` players.
pub fn exact_shapley_capped<O: SetValueOracle + ?Sized>(
    oracle: &O,
    cap: usize,
) -> Result<AttributionMatrix> {
    let k = oracle.arity();
    if k > cap || k > MAX_PLAYERS {
        return Err(Error::ArityTooLarge { k, cap: cap.min(MAX_PLAYERS) });
    }
    let all: Vec<Coalition> = (0..1u64 << k).map(Coalition::from_mask).collect();
    let values: Vec<Vec<f64>> = evaluate_batch(oracle, &all)?
        .into_iter()
        .map(|e| e.value)
        .collect();
    let m = oracle.output_dim();

    // |S|!(k-|S|-1)!/k! == 1 / (k * C(k-1, |S|))
    let weights: Vec<f64> = (0..k).map(|s| 1.0 / (k as f64 * binomial(k - 1, s))).collect();

    let mut entries = vec![vec![0.0; m]; k];
    for (mask, v_s) in values.iter().enumerate() {
        let s = Coalition::from_mask(mask as u64);
        let w = weights.get(s.len()).copied().unwrap_or(0.0);
        for (i, row) in entries.iter_mut().enumerate() {
            if s.contains(i) {
                continue;
            }
            let v_si = &values[s.with(i).mask() as usize];
            for j in 0..m {
                row[j] += w * (v_si[j] - v_s[j]);
            }
        }
    }
    let full = Coalition::full(k).mask() as usize;
    AttributionMatrix::new(entries, values[0].clone(), values[full].clone())
}

pub(crate) fn binomial(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    let r = r.min(n - r);
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapley::FnOracle;

    fn additive(w: Vec<f64>) -> impl Fn(Coalition) -> Vec<f64> + Sync {
        move |s: Coalition| vec![s.members().iter().map(|&i| w[i]).sum()]
    }

    #[test]
    fn additive_game_recovers_weights() {
        let oracle = FnOracle::new(3, 1, additive(vec![1.0, -2.0, 0.5]));
        let beta = exact_shapley(&oracle).unwrap();
        for (row, want) in beta.entries.iter().zip([1.0, -2.0, 0.5]) {
            assert!((row[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_game_is_null() {
        let oracle = FnOracle::new(4, 1, |_| vec![7.0]);
        let beta = exact_shapley(&oracle).unwrap();
        assert!(beta.entries.iter().all(|r| r[0].abs() < 1e-12));
    }

    #[test]
    fn squared_size_game_is_symmetric() {
        let oracle = FnOracle::new(3, 1, |s: Coalition| vec![(s.len() * s.len()) as f64]);
        let beta = exact_shapley(&oracle).unwrap();
        for row in &beta.entries {
            assert!((row[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn arity_cap_enforced() {
        let oracle = FnOracle::new(13, 1, |_| vec![0.0]);
        assert!(matches!(
            exact_shapley(&oracle),
            Err(Error::ArityTooLarge { k: 13, cap: 12 })
        ));
    }

    #[test]
    fn oracle_failure_names_coalition() {
        struct Failing;
        impl SetValueOracle for Failing {
            fn arity(&self) -> usize {
                2
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn evaluate(&self, c: Coalition) -> Result<Vec<f64>> {
                if c.mask() == 0b10 {
                    Err(Error::Transport("boom".into()))
                } else {
                    Ok(vec![0.0])
                }
            }
        }
        match exact_shapley(&Failing) {
            Err(Error::Oracle { coalition, .. }) => assert_eq!(coalition, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(12, 6), 924.0);
        assert_eq!(binomial(3, 4), 0.0);
    }
}
