use std::collections::BTreeMap;

use super::coalition::{Coalition, EvaluatedCoalition};
use crate::error::{Error, Result};
use crate::parallel::parallel_map;

/// A set function over `k` players returning one value per output dimension.
///
/// Implementations must be deterministic: the same coalition always yields
/// the same vector. `evaluate` may be called concurrently from up to
/// [`SetValueOracle::parallelism`] threads.
pub trait SetValueOracle: Sync {
    /// Number of players.
    fn arity(&self) -> usize;

    /// Length `m` of every value vector.
    fn output_dim(&self) -> usize;

    fn evaluate(&self, coalition: Coalition) -> Result<Vec<f64>>;

    /// How many evaluations may be in flight at once.
    fn parallelism(&self) -> usize {
        1
    }
}

impl<T: SetValueOracle + ?Sized> SetValueOracle for &T {
    fn arity(&self) -> usize {
        (**self).arity()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn evaluate(&self, coalition: Coalition) -> Result<Vec<f64>> {
        (**self).evaluate(coalition)
    }
    fn parallelism(&self) -> usize {
        (**self).parallelism()
    }
}

/// Evaluates every distinct coalition once and returns results aligned with
/// the input order. Failures carry the offending coalition.
pub fn evaluate_batch<O: SetValueOracle + ?Sized>(
    oracle: &O,
    coalitions: &[Coalition],
) -> Result<Vec<EvaluatedCoalition>> {
    let m = oracle.output_dim();
    if m == 0 {
        return Err(Error::Precondition("oracle output dimension must be at least 1".into()));
    }
    let distinct: Vec<Coalition> = coalitions
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let values = parallel_map(distinct.len(), oracle.parallelism(), |idx| {
        let c = distinct[idx];
        let wrap = |source: Error| Error::Oracle {
            coalition: c.members(),
            source: Box::new(source),
        };
        let v = oracle.evaluate(c).map_err(wrap)?;
        if v.len() != m {
            return Err(wrap(Error::DimensionMismatch { expected: m, found: v.len() }));
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(wrap(Error::NonFinite { index }));
        }
        Ok(v)
    })?;

    let lookup: BTreeMap<Coalition, Vec<f64>> = distinct.into_iter().zip(values).collect();
    Ok(coalitions
        .iter()
        .map(|c| EvaluatedCoalition {
            coalition: *c,
            value: lookup[c].clone(),
        })
        .collect())
}

/// A set function backed by a closure; handy for synthetic games.
pub struct FnOracle<F> {
    k: usize,
    m: usize,
    f: F,
}

impl<F> FnOracle<F>
where
    F: Fn(Coalition) -> Vec<f64> + Sync,
{
    pub fn new(k: usize, m: usize, f: F) -> Self {
        FnOracle { k, m, f }
    }
}

impl<F> SetValueOracle for FnOracle<F>
where
    F: Fn(Coalition) -> Vec<f64> + Sync,
{
    fn arity(&self) -> usize {
        self.k
    }
    fn output_dim(&self) -> usize {
        self.m
    }
    fn evaluate(&self, coalition: Coalition) -> Result<Vec<f64>> {
        Ok((self.f)(coalition))
    }
}
