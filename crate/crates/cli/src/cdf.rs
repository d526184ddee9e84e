use std::io::Write;

use serde::Serialize;

use crate::CliError;

/// Empirical distribution of localization errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    /// Sorted, non-negative (m).
    pub errors: Vec<f64>,
    /// `probabilities[i] = (i + 1) / n`.
    pub probabilities: Vec<f64>,
}

#[derive(Serialize)]
struct CdfRow {
    error_m: f64,
    probability: f64,
}

impl CdfTable {
    pub fn from_errors(mut errors: Vec<f64>) -> Result<Self, CliError> {
        if let Some(bad) = errors.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(CliError::Runtime(format!("invalid localization error {bad}")));
        }
        errors.sort_by(f64::total_cmp);
        let n = errors.len() as f64;
        let probabilities = (1..=errors.len()).map(|i| i as f64 / n).collect();
        Ok(Self { errors, probabilities })
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    /// `P(error ≤ x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        self.errors.partition_point(|e| *e <= x) as f64 / self.errors.len() as f64
    }

    /// Smallest error `e` with `P(error ≤ e) ≥ q`.
    pub fn quantile(&self, q: f64) -> f64 {
        if self.errors.is_empty() {
            return f64::NAN;
        }
        let n = self.errors.len();
        let k = ((q * n as f64).ceil() as usize).clamp(1, n);
        self.errors[k - 1]
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.errors.len() == self.probabilities.len()
            && self.errors.iter().all(|e| *e >= 0.0)
            && self.errors.windows(2).all(|w| w[0] <= w[1])
            && self.probabilities.windows(2).all(|w| w[0] <= w[1])
            && self.probabilities.iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// `self` has errors no larger than `other` at every listed quantile.
    pub fn dominates_at(&self, other: &CdfTable, quantiles: &[f64]) -> bool {
        quantiles.iter().all(|&q| self.quantile(q) <= other.quantile(q))
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), CliError> {
        let mut out = csv::Writer::from_writer(w);
        for (e, p) in self.errors.iter().zip(&self.probabilities) {
            out.serialize(CdfRow { error_m: *e, probability: *p })?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_and_limits() {
        let t = CdfTable::from_errors(vec![3.0, 1.0, 2.0, 4.0]).unwrap();
        assert!(t.is_valid());
        assert_eq!(t.median(), 2.0);
        assert_eq!(t.quantile(0.75), 3.0);
        assert_eq!(t.cdf(f64::INFINITY), 1.0);
        assert_eq!(t.cdf(-1.0), 0.0);
        assert_eq!(t.cdf(2.5), 0.5);
        assert!(CdfTable::from_errors(vec![-1.0]).is_err());
    }

    #[test]
    fn dominance() {
        let a = CdfTable::from_errors(vec![0.5, 1.0, 1.5, 2.0]).unwrap();
        let b = CdfTable::from_errors(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(a.dominates_at(&b, &[0.25, 0.5, 0.75]));
        assert!(!b.dominates_at(&a, &[0.25, 0.5, 0.75]));
    }
}
