//! Small, dependency-light numerical layer: dense matrices and Cholesky
//! factorisation, seeded random streams, multivariate normal sampling,
//! gamma/chi-square/normal distribution functions and least squares.

pub mod linalg;
pub mod mvn;
pub mod ols;
pub mod rng;
pub mod special;

pub use linalg::{cholesky, Cholesky, Matrix, SpdMatrix};
pub use mvn::{mvn_sample, MvnSampler};
pub use ols::{ols_fit, OlsFit};
pub use rng::RngStream;
pub use special::{chi2_cdf, chi2_sf, normal_cdf, normal_quantile};

/// Sample variance with the `n - 1` denominator. Zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
