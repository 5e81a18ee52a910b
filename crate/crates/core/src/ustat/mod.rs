//! Pairwise four-sample U-statistics, their influence values and the
//! covariance of the statistic vector.

pub mod covariance;
pub mod influence;
pub mod kernel;
pub mod pair;

use serde::Serialize;

use crate::error::Result;

pub use covariance::{assemble_covariance, CovarianceAssembly};
pub use influence::{influence_values, pair_variance, InfluenceComponents, StratumModel};
pub use kernel::kernel_phi;
pub use pair::{
    pairwise_adjusted_u_exact, pairwise_exact, pairwise_kernel, pairwise_sampled, KernelMode, KernelPolicy,
    KernelSummary, SampleSize, WeightedGroup,
};

/// Pairs `(p, q)` with `p < q` in lexicographic order.
pub fn pair_index(num_strata: usize) -> Vec<(usize, usize)> {
    (0..num_strata)
        .flat_map(|p| (p + 1..num_strata).map(move |q| (p, q)))
        .collect()
}

/// One entry of the statistic vector.
#[derive(Debug, Clone, Serialize)]
pub struct PairStatistic {
    pub p: usize,
    pub q: usize,
    pub u_value: f64,
    /// `ψ` for `[pt, pc, qt, qc]`.
    #[serde(skip)]
    pub influence: [Vec<f64>; 4],
    pub sigma2: f64,
    pub n_pair: usize,
    pub mode: KernelMode,
    pub n_eval: u64,
    pub components: InfluenceComponents,
}

/// Kernel summary, influence values and variance for strata `p < q`.
pub fn pair_statistic(
    p: usize,
    q: usize,
    mp: &StratumModel,
    mq: &StratumModel,
    kernel: &KernelSummary,
) -> Result<PairStatistic> {
    let (influence, components) = influence_values(mp, mq, kernel)?;
    Ok(PairStatistic {
        p,
        q,
        u_value: kernel.u_value,
        sigma2: pair_variance(&influence),
        n_pair: mp.n + mq.n,
        mode: kernel.mode,
        n_eval: kernel.n_eval,
        influence,
        components,
    })
}

/// Groups `[pt, pc, qt, qc]` of a pair.
pub fn pair_groups<'a>(mp: &'a StratumModel, mq: &'a StratumModel) -> [&'a WeightedGroup; 4] {
    [&mp.groups[0], &mp.groups[1], &mq.groups[0], &mq.groups[1]]
}
