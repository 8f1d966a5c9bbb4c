//! Fisher-z conditional independence tests on partial correlations.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiTest {
    pub independent: bool,
    pub p_value: f64,
    pub partial_corr: f64,
}

/// Correlation matrix of a data set, reused across many tests.
#[derive(Debug, Clone)]
pub struct FisherZ {
    corr: Matrix,
    samples: usize,
}

impl FisherZ {
    pub fn new(data: &Matrix) -> Result<Self> {
        let corr = crate::eval::pearson_corr(data, data)?;
        Ok(Self { corr, samples: data.rows() })
    }

    pub fn n(&self) -> usize {
        self.corr.rows()
    }

    /// Partial correlation of `i` and `j` given `cond`, from the inverse of the
    /// correlation sub-matrix. `None` when that sub-matrix is singular.
    pub fn partial_corr(&self, i: usize, j: usize, cond: &[usize]) -> Option<f64> {
        if cond.is_empty() {
            return Some(self.corr[(i, j)]);
        }
        let idx: Vec<usize> = [i, j].iter().chain(cond).copied().collect();
        let sub = Matrix::from_fn(idx.len(), idx.len(), |a, b| self.corr[(idx[a], idx[b])]);
        let p = sub.inverse().ok()?;
        let denom = (p[(0, 0)] * p[(1, 1)]).sqrt();
        (denom.is_finite() && denom > 0.0).then(|| (-p[(0, 1)] / denom).clamp(-1.0, 1.0))
    }

    pub fn test(&self, i: usize, j: usize, cond: &[usize], alpha: f64) -> Result<CiTest> {
        let dof = self.samples as f64 - cond.len() as f64 - 3.0;
        if !(dof > 0.0) {
            return Err(Error::Precondition(format!(
                "Fisher-z needs more than {} samples for {} conditioning variables",
                cond.len() + 3,
                cond.len()
            )));
        }
        let Some(r) = self.partial_corr(i, j, cond) else {
            // A singular conditioning set is reported as dependence.
            return Ok(CiTest { independent: false, p_value: 0.0, partial_corr: f64::NAN });
        };
        let r_safe = r.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
        let z = dof.sqrt() * r_safe.atanh();
        let std = Normal::standard();
        let p_value = (2.0 * (1.0 - std.cdf(z.abs()))).clamp(0.0, 1.0);
        Ok(CiTest { independent: p_value > alpha, p_value, partial_corr: r })
    }
}

/// One-off test of `i ⟂ j | cond` on `data`.
pub fn fisher_z_test(data: &Matrix, i: usize, j: usize, cond: &[usize], alpha: f64) -> Result<CiTest> {
    let n = data.cols();
    if i >= n || j >= n || i == j || cond.iter().any(|&c| c >= n || c == i || c == j) {
        return Err(Error::Config(format!("invalid test indices {i}, {j} | {cond:?} for {n} variables")));
    }
    FisherZ::new(data)?.test(i, j, cond, alpha)
}
