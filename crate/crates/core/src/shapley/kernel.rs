use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::coalition::{Coalition, EvaluatedCoalition, MAX_PLAYERS};
use super::matrix::AttributionMatrix;
use super::sampling::kernel_weight;
use crate::error::{Anchor, Error, Result};

/// Condition number above which the normal equations are solved through an
/// SVD pseudo-inverse instead of a Cholesky factorisation.
pub const CONDITION_FALLBACK: f64 = 1e12;

/// Singular values below `RANK_TOLERANCE * sigma_max` count as zero.
const RANK_TOLERANCE: f64 = 1e-14;

/// Kernel SHAP with the efficiency constraint imposed exactly.
///
/// The empty and full coalitions carry infinite kernel weight, so they are
/// not regressed on: the intercept is fixed to `v(∅)` and the coefficients
/// are constrained to sum to `v(D) - v(∅)`. The remaining coalitions enter
/// a weighted least-squares fit with the Shapley kernel weight times their
/// multiplicity in the input.
pub fn kernel_shap(coalitions: &[EvaluatedCoalition], k: usize) -> Result<AttributionMatrix> {
    if k == 0 || k > MAX_PLAYERS {
        return Err(Error::InvalidConfig(format!("arity {k} outside 1..={MAX_PLAYERS}")));
    }
    let full = Coalition::full(k);

    // Collapse duplicates: multiplicity becomes part of the weight.
    let mut pooled: BTreeMap<Coalition, (&[f64], usize)> = BTreeMap::new();
    for e in coalitions {
        if e.coalition.mask() & !full.mask() != 0 {
            return Err(Error::InvalidConfig(format!(
                "coalition {:?} references players outside 0..{k}",
                e.coalition.members()
            )));
        }
        match pooled.get_mut(&e.coalition) {
            Some((_, count)) => *count += 1,
            None => {
                pooled.insert(e.coalition, (&e.value, 1));
            }
        }
    }
    let v_empty = pooled
        .get(&Coalition::EMPTY)
        .ok_or(Error::MissingAnchor(Anchor::Empty))?
        .0
        .to_vec();
    let v_full = pooled
        .get(&full)
        .ok_or(Error::MissingAnchor(Anchor::Full))?
        .0
        .to_vec();
    let m = v_empty.len();
    if m == 0 {
        return Err(Error::Precondition("value vectors must be non-empty".into()));
    }
    for (v, _) in pooled.values() {
        if v.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: v.len() });
        }
    }
    let gap: Vec<f64> = v_full.iter().zip(&v_empty).map(|(f, e)| f - e).collect();

    if k == 1 {
        return AttributionMatrix::new(vec![gap], v_empty, v_full);
    }

    let rows: Vec<(Coalition, &[f64], f64)> = pooled
        .iter()
        .filter(|(c, _)| !c.is_empty() && **c != full)
        .map(|(c, (v, count))| (*c, *v, *count as f64 * kernel_weight(k, c.len())))
        .collect();

    let d = k - 1;
    if rows.len() < d {
        return Err(rank_error(&rows, k, rows.len()));
    }
    let groups = indistinguishable_players(&rows, k);
    if !groups.is_empty() {
        return Err(Error::RankDeficient { rank: d - groups.iter().map(|g| g.len() - 1).sum::<usize>(), expected: d, indistinguishable: groups });
    }

    // Substitute beta_{k-1} = gap - sum_{i<k-1} beta_i:
    //   v(S) - v(∅) - z_{k-1} * gap = sum_{i<k-1} (z_i - z_{k-1}) beta_i
    let last = k - 1;
    let mut normal = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DMatrix::<f64>::zeros(d, m);
    let mut x = vec![0.0; d];
    for (c, v, w) in &rows {
        let z_last = if c.contains(last) { 1.0 } else { 0.0 };
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if c.contains(i) { 1.0 } else { 0.0 } - z_last;
        }
        for a in 0..d {
            if x[a] == 0.0 {
                continue;
            }
            for b in 0..d {
                normal[(a, b)] += w * x[a] * x[b];
            }
            for j in 0..m {
                let y = v[j] - v_empty[j] - z_last * gap[j];
                rhs[(a, j)] += w * x[a] * y;
            }
        }
    }

    let svd = normal.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * sigma_max)
        .count();
    if sigma_max <= 0.0 || rank < d {
        return Err(rank_error(&rows, k, rank));
    }
    let solution = if sigma_max / sigma_min <= CONDITION_FALLBACK {
        match normal.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => pseudo_solve(&normal, &rhs)?,
        }
    } else {
        log::debug!("kernel_shap: condition {:e}, using pseudo-inverse", sigma_max / sigma_min);
        pseudo_solve(&normal, &rhs)?
    };

    let mut entries = vec![vec![0.0; m]; k];
    for j in 0..m {
        let mut acc = 0.0;
        for i in 0..d {
            entries[i][j] = solution[(i, j)];
            acc += solution[(i, j)];
        }
        entries[last][j] = gap[j] - acc;
    }
    AttributionMatrix::new(entries, v_empty, v_full)
}

fn pseudo_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pinv = a
        .clone()
        .pseudo_inverse(RANK_TOLERANCE * a.norm())
        .map_err(|e| Error::Precondition(format!("pseudo-inverse failed: {e}")))?;
    Ok(pinv * b)
}

fn rank_error(rows: &[(Coalition, &[f64], f64)], k: usize, rank: usize) -> Error {
    Error::RankDeficient {
        rank,
        expected: k - 1,
        indistinguishable: indistinguishable_players(rows, k),
    }
}

/// Groups of players whose membership pattern is identical across every
/// regression row; their coefficients cannot be separated.
fn indistinguishable_players(rows: &[(Coalition, &[f64], f64)], k: usize) -> Vec<Vec<usize>> {
    let mut by_pattern: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for player in 0..k {
        let pattern = rows.iter().map(|(c, _, _)| c.contains(player)).collect();
        by_pattern.entry(pattern).or_default().push(player);
    }
    let mut groups: Vec<Vec<usize>> = by_pattern.into_values().filter(|g| g.len() > 1).collect();
    groups.sort();
    groups
}
