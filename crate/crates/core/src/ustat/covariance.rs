//! Assembly of the covariance of the vector of pairwise statistics.
//!
//! For stratum `s` and group `ω`, each subject contributes a row of length
//! `P = S(S-1)/2`: its influence value in every pair containing `s` and zero
//! elsewhere. Then `Σ̂ = Σ_{s,ω} (N / n_{sω}) Cov(rows)`.

use crate::error::{Error, Result};
use crate::numkit::linalg::{Matrix, SpdMatrix};

use super::{pair_index, PairStatistic};

#[derive(Debug, Clone)]
pub struct CovarianceAssembly {
    pub sigma_hat: SpdMatrix,
    /// `(N / n_{sω}) Cov(ψ̃_{sω})` for every stratum and group.
    pub contributions: Vec<[Matrix; 2]>,
    pub n_total: usize,
}

/// `pairs` must be in [`pair_index`] order; `group_sizes[s] = [n_t, n_c]`.
pub fn assemble_covariance(
    pairs: &[PairStatistic],
    group_sizes: &[[usize; 2]],
) -> Result<CovarianceAssembly> {
    let s_count = group_sizes.len();
    let order = pair_index(s_count);
    if order.len() != pairs.len() || order.iter().zip(pairs).any(|(&(p, q), ps)| (p, q) != (ps.p, ps.q)) {
        return Err(Error::InvalidArgument("pairs are not in lexicographic order".into()));
    }
    let n_total: usize = group_sizes.iter().flatten().sum();
    let dim = pairs.len();
    let mut sigma = Matrix::zeros(dim, dim);
    let mut contributions = Vec::with_capacity(s_count);
    for (s, sizes) in group_sizes.iter().enumerate() {
        let mut per_group: [Matrix; 2] = [Matrix::zeros(dim, dim), Matrix::zeros(dim, dim)];
        for (g, &n) in sizes.iter().enumerate() {
            let mut rows = Matrix::zeros(n, dim);
            for (r, ps) in pairs.iter().enumerate() {
                let slot = if ps.p == s {
                    g
                } else if ps.q == s {
                    2 + g
                } else {
                    continue;
                };
                let values = &ps.influence[slot];
                if values.len() != n {
                    return Err(Error::InvalidArgument("influence length does not match group size".into()));
                }
                for (i, v) in values.iter().enumerate() {
                    rows[(i, r)] = *v;
                }
            }
            let mut cov = rows.row_covariance();
            cov.scale(n_total as f64 / n as f64);
            sigma.add_assign(&cov);
            per_group[g] = cov;
        }
        contributions.push(per_group);
    }
    Ok(CovarianceAssembly {
        sigma_hat: SpdMatrix::new(sigma)?,
        contributions,
        n_total,
    })
}
