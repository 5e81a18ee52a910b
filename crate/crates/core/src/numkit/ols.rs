use crate::error::{Error, Result};

use super::linalg::{cholesky_gram, Matrix};

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    /// `σ̂² (XᵀX)⁻¹`
    pub covariance: Matrix,
    /// `RSS / (n - p)`
    pub residual_variance: f64,
    pub residuals: Vec<f64>,
}

/// Least squares through the normal equations.
pub fn ols_fit(x: &Matrix, y: &[f64]) -> Result<OlsFit> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::InvalidArgument(format!(
            "design has {n} rows but response has {}",
            y.len()
        )));
    }
    if n <= p {
        return Err(Error::SingularDesign);
    }
    let chol = cholesky_gram(&x.weighted_gram(None))?;
    let xty: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| x[(i, j)] * y[i]).sum())
        .collect();
    let coefficients = chol.solve(&xty);
    let fitted = x.mat_vec(&coefficients);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let residual_variance = rss / (n - p) as f64;
    let mut covariance = chol.inverse();
    covariance.scale(residual_variance);
    Ok(OlsFit {
        coefficients,
        covariance,
        residual_variance,
        residuals,
    })
}
