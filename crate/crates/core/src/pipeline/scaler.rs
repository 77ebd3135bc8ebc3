use crate::error::{Error, Result};

/// Per-entity mean scaling fitted on a context window.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    divisors: Vec<f64>,
}

impl Scaler {
    /// Divisor per entity is its context mean, or 1 when that mean is 0.
    pub fn fit(context: &[Vec<f64>]) -> Result<Self> {
        let first = context
            .first()
            .ok_or_else(|| Error::Contract("cannot fit a scaler on an empty context".into()))?;
        let dim = first.len();
        let mut sums = vec![0.0; dim];
        for row in context {
            if row.len() != dim {
                return Err(Error::dimension("fit_scaler", &[dim], &[row.len()]));
            }
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = context.len() as f64;
        let divisors = sums
            .into_iter()
            .map(|s| {
                let m = s / n;
                if m == 0.0 {
                    1.0
                } else {
                    m
                }
            })
            .collect();
        Ok(Scaler { divisors })
    }

    pub fn identity(dim: usize) -> Self {
        Scaler {
            divisors: vec![1.0; dim],
        }
    }

    pub fn from_divisors(divisors: Vec<f64>) -> Result<Self> {
        if divisors.iter().any(|d| *d == 0.0 || !d.is_finite()) {
            return Err(Error::Contract("scaler divisors must be finite and nonzero".into()));
        }
        Ok(Scaler { divisors })
    }

    pub fn divisors(&self) -> &[f64] {
        &self.divisors
    }

    pub fn dim(&self) -> usize {
        self.divisors.len()
    }

    pub fn scale_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.divisors).map(|(v, d)| v / d).collect()
    }

    pub fn unscale_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.divisors).map(|(v, d)| v * d).collect()
    }

    pub fn scale(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.scale_row(r)).collect()
    }

    pub fn unscale(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.unscale_row(r)).collect()
    }
}
