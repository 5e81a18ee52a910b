use crate::error::{Error, Result};

use super::linalg::{cholesky, Cholesky, SpdMatrix};
use super::rng::RngStream;

/// Reusable sampler for `N(0, cov)`: draws are `L z` with `z` standard normal.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    chol: Cholesky,
}

impl MvnSampler {
    pub fn new(cov: &SpdMatrix) -> Result<Self> {
        Ok(MvnSampler {
            chol: cholesky(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.lower.rows()
    }

    pub fn jitter(&self) -> f64 {
        self.chol.jitter
    }

    /// Fill `out` with one draw; `z` is scratch space of the same length.
    pub fn sample_into(&self, rng: &mut RngStream, z: &mut [f64], out: &mut [f64]) {
        let l = &self.chol.lower;
        let k = l.rows();
        for zi in z.iter_mut() {
            *zi = rng.normal();
        }
        for i in 0..k {
            let row = l.row(i);
            out[i] = row[..=i].iter().zip(&z[..=i]).map(|(a, b)| a * b).sum();
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let k = self.dim();
        let mut z = vec![0.0; k];
        let mut out = vec![0.0; k];
        self.sample_into(rng, &mut z, &mut out);
        out
    }
}

/// `count` independent draws from `N(0, cov)`.
pub fn mvn_sample(rng: &mut RngStream, cov: &SpdMatrix, count: usize) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("mvn_sample needs count >= 1".into()));
    }
    let sampler = MvnSampler::new(cov)?;
    Ok((0..count).map(|_| sampler.sample(rng)).collect())
}
