//! Loss-sample container shared by every estimator and diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered collection of positive loss amounts with a provenance label.
///
/// Estimation routines never see raw vectors: they take a `LossSample` plus a
/// threshold `u` and operate on the exceedances `x_i > u` (in original
/// order).
#[derive(Debug, Clone)]
pub struct LossSample {
    values: Vec<f64>,
    source: String,
}

/// Bookkeeping of a thresholding step: total sample size `n`, exceedance
/// count `n_u`, and the threshold itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceSummary {
    pub n: usize,
    pub n_u: usize,
    pub u: f64,
}

impl ExceedanceSummary {
    pub fn new(n: usize, n_u: usize, u: f64) -> Result<Self> {
        if n_u > n {
            return Err(Error::InvalidInput(format!(
                "exceedance count {n_u} exceeds sample size {n}"
            )));
        }
        Ok(ExceedanceSummary { n, n_u, u })
    }
}

impl LossSample {
    /// Validate and wrap loss amounts. Every value must be finite and
    /// strictly positive; `source` records where the data came from
    /// (file path, synthetic seed, ...).
    pub fn new(values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "loss amount at position {i} is {v}; losses must be positive and finite"
                )));
            }
        }
        Ok(LossSample {
            values,
            source: source.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Exceedances of `u` (strict), preserving sample order.
    pub fn exceedances(&self, u: f64) -> Vec<f64> {
        self.values.iter().copied().filter(|&x| x > u).collect()
    }

    /// Count-level view of the thresholding step.
    pub fn summary(&self, u: f64) -> ExceedanceSummary {
        let n_u = self.values.iter().filter(|&&x| x > u).count();
        ExceedanceSummary {
            n: self.values.len(),
            n_u,
            u,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_and_nonfinite() {
        assert!(LossSample::new(vec![1.0, -2.0], "test").is_err());
        assert!(LossSample::new(vec![1.0, 0.0], "test").is_err());
        assert!(LossSample::new(vec![1.0, f64::NAN], "test").is_err());
        assert!(LossSample::new(vec![1.0, f64::INFINITY], "test").is_err());
    }

    #[test]
    fn exceedances_are_strict_and_ordered() {
        let s = LossSample::new(vec![3.0, 1.0, 2.0, 5.0], "test").unwrap();
        assert_eq!(s.exceedances(2.0), vec![3.0, 5.0]);
        let summary = s.summary(2.0);
        assert_eq!((summary.n, summary.n_u), (4, 2));
        assert_eq!(summary.u, 2.0);
    }

    #[test]
    fn summary_rejects_inconsistent_counts() {
        assert!(ExceedanceSummary::new(5, 6, 0.0).is_err());
        assert!(ExceedanceSummary::new(5, 5, 0.0).is_ok());
    }
}
