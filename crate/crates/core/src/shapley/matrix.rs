use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Document-by-output attribution scores.
///
/// `entries[i][j]` is the attribution of player `i` to output dimension `j`.
/// `baseline_value` and `full_value` are the oracle values of the empty and
/// full coalitions; for efficient estimators each column sums to their
/// difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub entries: Vec<Vec<f64>>,
    pub baseline_value: Vec<f64>,
    pub full_value: Vec<f64>,
}

impl AttributionMatrix {
    pub fn new(entries: Vec<Vec<f64>>, baseline_value: Vec<f64>, full_value: Vec<f64>) -> Result<Self> {
        let m = baseline_value.len();
        if full_value.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: full_value.len() });
        }
        for row in &entries {
            if row.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: row.len() });
            }
        }
        if let Some(index) = entries.iter().flatten().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(AttributionMatrix { entries, baseline_value, full_value })
    }

    /// Number of players (rows).
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    /// Number of output dimensions (columns).
    pub fn m(&self) -> usize {
        self.baseline_value.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.m()];
        for row in &self.entries {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// `full_value - baseline_value`, per output dimension.
    pub fn value_gap(&self) -> Vec<f64> {
        self.full_value
            .iter()
            .zip(&self.baseline_value)
            .map(|(f, b)| f - b)
            .collect()
    }

    /// Largest absolute deviation between column sums and the value gap.
    pub fn efficiency_error(&self) -> f64 {
        self.column_sums()
            .iter()
            .zip(self.value_gap())
            .map(|(s, g)| (s - g).abs())
            .fold(0.0, f64::max)
    }

    /// Reorders rows so that row `i` of the result is row `order[i]` of `self`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        AttributionMatrix {
            entries: order.iter().map(|&i| self.entries[i].clone()).collect(),
            baseline_value: self.baseline_value.clone(),
            full_value: self.full_value.clone(),
        }
    }

    /// Entrywise mean of equally shaped matrices.
    pub fn mean(items: &[AttributionMatrix]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyInput("attribution matrices"))?;
        let (k, m) = (first.k(), first.m());
        let mut acc = vec![vec![0.0; m]; k];
        for item in items {
            if item.k() != k || item.m() != m {
                return Err(Error::Shape(format!(
                    "cannot average {}x{} with {}x{}",
                    k,
                    m,
                    item.k(),
                    item.m()
                )));
            }
            for (a, row) in acc.iter_mut().zip(&item.entries) {
                for (x, v) in a.iter_mut().zip(row) {
                    *x += v;
                }
            }
        }
        let n = items.len() as f64;
        for row in &mut acc {
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        AttributionMatrix::new(acc, first.baseline_value.clone(), first.full_value.clone())
    }
}
