//! Per-subject influence values of a pairwise statistic.
//!
//! For a pair `(p, q)` with group weight means `θ_g`, weighted-kernel mean
//! `θ*` and `U = θ* / ∏ θ_g`, a subject `i` of group `g` in stratum `s`
//! receives
//!
//! ```text
//! ψ_i = c1_g (w_i - θ_g) + c2 (h̃_i - θ*) - (n_g / n_s) b_sᵀ J_s⁻¹ S_i
//! ```
//!
//! with `c1_g = -U / θ_g`, `c2 = 1 / ∏ θ`, `h̃_i` the projection of the
//! weighted kernel onto subject `i`, and `b_s = ∇_{β_s} U` assembled from the
//! mean weight gradients. The scaling is such that
//! `U - θ ≈ Σ_g (1/n_g) Σ_{i∈g} ψ_i`, hence
//! `σ̂² = Σ_g (N_pair / n_g) Var(ψ_g)`.
//!
//! All quantities are computed on weights divided by their group mean. The
//! statistic and the influence values are invariant to such rescaling.

use serde::Serialize;

use crate::data::{split_groups, Stratum};
use crate::error::{Error, Result};
use crate::numkit::linalg::{cholesky_gram, Matrix};
use crate::numkit::sample_variance;
use crate::propensity::WeightedStratum;

use super::pair::{KernelSummary, WeightedGroup};

pub const TREATED: usize = 0;
pub const CONTROL: usize = 1;

/// Everything the influence calculation needs from one stratum.
#[derive(Debug, Clone)]
pub struct StratumModel {
    pub id: String,
    /// Treated and control groups with mean-normalised weights.
    pub groups: [WeightedGroup; 2],
    /// Group means of the raw weights.
    pub raw_means: [f64; 2],
    /// Normalised weight gradients, one row per subject.
    pub gradients: [Matrix; 2],
    /// Propensity score contributions, one row per subject.
    pub scores: [Matrix; 2],
    /// Inverse of the propensity Jacobian; `None` for unit weights.
    pub jacobian_inv: Option<Matrix>,
    pub n: usize,
}

fn normalise(w: &[f64], grad: &Matrix) -> Result<(Vec<f64>, Matrix, f64)> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if !(mean.is_finite() && mean > 0.0) || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::DegenerateWeights);
    }
    let normalised = if w.iter().all(|&x| x == w[0]) {
        vec![1.0; w.len()]
    } else {
        w.iter().map(|x| x / mean).collect()
    };
    let mut g = grad.clone();
    g.scale(1.0 / mean);
    Ok((normalised, g, mean))
}

impl StratumModel {
    pub fn adjusted(ws: &WeightedStratum) -> Result<Self> {
        let s = &ws.stratum;
        let y = s.outcomes();
        let idx = [&ws.groups.treated, &ws.groups.control];
        let raw = [&ws.weights.treated, &ws.weights.control];
        let grads = [&ws.weights.grad_treated, &ws.weights.grad_control];
        let mut groups = Vec::with_capacity(2);
        let mut gradients = Vec::with_capacity(2);
        let mut raw_means = [0.0; 2];
        for g in 0..2 {
            let (w, gr, m) = normalise(raw[g], grads[g]).map_err(|e| e.in_stratum(s.id()))?;
            groups.push(WeightedGroup::new(idx[g].iter().map(|&i| y[i]).collect(), w));
            gradients.push(gr);
            raw_means[g] = m;
        }
        let mut neg = ws.fit.jacobian.clone();
        neg.scale(-1.0);
        let inv = cholesky_gram(&neg)
            .map_err(|_| Error::SingularJacobian.in_stratum(s.id()))?
            .inverse();
        let mut jacobian_inv = inv;
        jacobian_inv.scale(-1.0);
        let control = groups.pop().unwrap();
        let treated = groups.pop().unwrap();
        let gc = gradients.pop().unwrap();
        let gt = gradients.pop().unwrap();
        Ok(StratumModel {
            id: s.id().to_string(),
            groups: [treated, control],
            raw_means,
            gradients: [gt, gc],
            scores: [ws.fit.scores.select_rows(idx[0]), ws.fit.scores.select_rows(idx[1])],
            jacobian_inv: Some(jacobian_inv),
            n: s.len(),
        })
    }

    /// Unit weights, no propensity model.
    pub fn unadjusted(s: &Stratum) -> Self {
        let split = split_groups(s);
        let y = s.outcomes();
        let grp = |idx: &[usize]| WeightedGroup::unit(idx.iter().map(|&i| y[i]).collect());
        let d = s.dim();
        StratumModel {
            id: s.id().to_string(),
            groups: [grp(&split.treated), grp(&split.control)],
            raw_means: [1.0, 1.0],
            gradients: [Matrix::zeros(split.treated.len(), d), Matrix::zeros(split.control.len(), d)],
            scores: [Matrix::zeros(split.treated.len(), d), Matrix::zeros(split.control.len(), d)],
            jacobian_inv: None,
            n: s.len(),
        }
    }

    pub fn n_group(&self, g: usize) -> usize {
        self.groups[g].len()
    }
}

/// Intermediate constants of the influence formula, indexed
/// `[side][group]` with side 0 = `p`, 1 = `q`.
#[derive(Debug, Clone, Serialize)]
pub struct InfluenceComponents {
    pub u_value: f64,
    pub theta_star: f64,
    pub theta: [[f64; 2]; 2],
    pub c1: [[f64; 2]; 2],
    pub c2: f64,
    /// `∇_{β_s} U` for each side.
    pub b: [Vec<f64>; 2],
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    (0..m.cols()).map(|j| m.column(j).iter().sum::<f64>() / n).collect()
}

/// `ψ` for the four groups `[pt, pc, qt, qc]` of one pair.
pub fn influence_values(
    mp: &StratumModel,
    mq: &StratumModel,
    kernel: &KernelSummary,
) -> Result<([Vec<f64>; 4], InfluenceComponents)> {
    let models = [mp, mq];
    let group = |slot: usize| &models[slot / 2].groups[slot % 2];
    let theta: [[f64; 2]; 2] = std::array::from_fn(|s| {
        std::array::from_fn(|g| {
            let w = &models[s].groups[g].weights;
            w.iter().sum::<f64>() / w.len() as f64
        })
    });
    let prod: f64 = theta.iter().flatten().product();
    let u = kernel.u_value;
    let theta_star = kernel.theta_star;
    let c1: [[f64; 2]; 2] = std::array::from_fn(|s| std::array::from_fn(|g| -u / theta[s][g]));
    let c2 = 1.0 / prod;

    let htilde = kernel.htilde([group(0), group(1), group(2), group(3)]);

    let mut b: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for s in 0..2 {
        let m = models[s];
        let d = m.gradients[0].cols();
        let mut bs = vec![0.0; d];
        for g in 0..2 {
            let grad = &m.gradients[g];
            let c3 = column_means(grad);
            let partial = &kernel.partial[2 * s + g];
            let n = grad.rows() as f64;
            for (j, bj) in bs.iter_mut().enumerate() {
                let c4: f64 = (0..grad.rows()).map(|i| grad[(i, j)] * partial[i]).sum::<f64>() / n;
                *bj += c1[s][g] * c3[j] + c2 * c4;
            }
        }
        b[s] = bs;
    }

    let mut psi: [Vec<f64>; 4] = Default::default();
    for slot in 0..4 {
        let (s, g) = (slot / 2, slot % 2);
        let m = models[s];
        let w = &m.groups[g].weights;
        let ng = w.len() as f64;
        let projected = m.jacobian_inv.as_ref().map(|jinv| jinv.transpose().mat_vec(&b[s]));
        psi[slot] = (0..w.len())
            .map(|i| {
                let mut v = c1[s][g] * (w[i] - theta[s][g]) + c2 * (htilde[slot][i] - theta_star);
                if let Some(a) = &projected {
                    let si = m.scores[g].row(i);
                    let dot: f64 = a.iter().zip(si).map(|(x, y)| x * y).sum();
                    v -= ng / m.n as f64 * dot;
                }
                v
            })
            .collect();
    }
    if psi.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    Ok((
        psi,
        InfluenceComponents {
            u_value: u,
            theta_star,
            theta,
            c1,
            c2,
            b,
        },
    ))
}

/// `σ̂² = Σ_g (N_pair / n_g) Var(ψ_g)`.
pub fn pair_variance(psi: &[Vec<f64>; 4]) -> f64 {
    let n_pair: usize = psi.iter().map(Vec::len).sum();
    psi.iter()
        .map(|p| n_pair as f64 / p.len() as f64 * sample_variance(p))
        .sum()
}
