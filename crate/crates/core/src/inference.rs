//! Global heterogeneity tests: the propensity-adjusted U test, its
//! unadjusted counterpart, and the regression likelihood-ratio baseline.

use serde::Serialize;

use crate::data::{HFunction, StratifiedDataset};
use crate::error::{Error, Result};
use crate::numkit::linalg::{Matrix, SpdMatrix};
use crate::numkit::rng::keys;
use crate::numkit::{chi2_sf, normal_quantile, ols_fit, MvnSampler, RngStream};
use crate::par::{map_indexed, try_map_indexed, Exec};
use crate::propensity::{prepare_stratum, TrimPolicy, TrimReport};
use crate::report::{serialize_f64, serialize_opt_f64, serialize_rows, serialize_vec};
use crate::ustat::{
    assemble_covariance, pair_groups, pair_index, pair_statistic, pairwise_kernel, KernelMode, KernelPolicy,
    PairStatistic, StratumModel,
};

/// Reference draws are generated in chunks of this size, each from its own
/// substream, so the p-value does not depend on the thread count.
pub const REFERENCE_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestConfig {
    pub h: HFunction,
    pub trim: TrimPolicy,
    pub kernel: KernelPolicy,
    pub reference_draws: usize,
    pub alpha: f64,
    /// Also report the max-statistic `√N max |U - 1/2|` (experimental).
    pub max_statistic: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            h: HFunction::One,
            trim: TrimPolicy::Overlap,
            kernel: KernelPolicy::default(),
            reference_draws: 100_000,
            alpha: 0.05,
            max_statistic: false,
            exec: Exec::Parallel,
        }
    }
}

impl TestConfig {
    fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.reference_draws == 0 {
            return Err(Error::InvalidArgument("reference_draws must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairReport {
    /// 1-based stratum positions.
    pub p: usize,
    pub q: usize,
    pub p_id: String,
    pub q_id: String,
    #[serde(serialize_with = "serialize_f64")]
    pub u: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub ci_lo: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub ci_hi: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub sigma2: f64,
    pub n_pair: usize,
    pub mode: KernelMode,
    pub n_eval: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrimSummary {
    pub stratum: String,
    pub rule: TrimPolicy,
    pub removed_treated: usize,
    pub removed_control: usize,
    pub n_treated: usize,
    pub n_control: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MaxStatistic {
    #[serde(serialize_with = "serialize_f64")]
    pub statistic: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeterogeneityReport {
    pub adjusted: bool,
    pub num_strata: usize,
    pub n_total: usize,
    #[serde(serialize_with = "serialize_vec")]
    pub u_vector: Vec<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub sigma_hat: Vec<Vec<f64>>,
    #[serde(serialize_with = "serialize_f64")]
    pub t_a: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub p_value: f64,
    pub reject: bool,
    pub pairs: Vec<PairReport>,
    pub trim: Vec<TrimSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_statistic: Option<MaxStatistic>,
    #[serde(serialize_with = "serialize_f64")]
    pub reference_jitter: f64,
    pub config: TestConfig,
    pub seed: u64,
    #[serde(skip)]
    pub pair_statistics: Vec<PairStatistic>,
    #[serde(skip)]
    pub sigma_matrix: Option<SpdMatrix>,
}

/// Simulated reference sample of `stat(r)` for `r ~ N(0, Σ)`.
pub fn reference_sample<F>(sigma: &SpdMatrix, draws: usize, rng: &RngStream, exec: Exec, stat: F) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let sampler = MvnSampler::new(sigma)?;
    let k = sampler.dim();
    let chunks = draws.div_ceil(REFERENCE_CHUNK);
    let parts = map_indexed(exec, chunks, |c| {
        let mut r = rng.substream(c as u64);
        let len = REFERENCE_CHUNK.min(draws - c * REFERENCE_CHUNK);
        let mut z = vec![0.0; k];
        let mut out = vec![0.0; k];
        (0..len)
            .map(|_| {
                sampler.sample_into(&mut r, &mut z, &mut out);
                stat(&out)
            })
            .collect::<Vec<f64>>()
    });
    Ok((parts.concat(), sampler.jitter()))
}

/// `(#{r ≥ t} + 1) / (L + 1)`.
pub fn monte_carlo_pvalue(reference: &[f64], t: f64) -> f64 {
    let exceed = reference.iter().filter(|&&r| r >= t).count();
    (exceed as f64 + 1.0) / (reference.len() as f64 + 1.0)
}

pub fn squared_norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

pub fn max_abs(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// p-value of `T_a` against `||r||²`, `r ~ N(0, Σ)`.
pub fn reference_pvalue(sigma: &SpdMatrix, t_a: f64, draws: usize, rng: &RngStream, exec: Exec) -> Result<f64> {
    let (sample, _) = reference_sample(sigma, draws, rng, exec, squared_norm)?;
    Ok(monte_carlo_pvalue(&sample, t_a))
}

/// `U ± z_{1-α/2} σ̂ / √N_pair`.
pub fn pair_confidence_interval(u: f64, sigma2: f64, n_pair: usize, alpha: f64) -> (f64, f64) {
    let half = normal_quantile(1.0 - alpha / 2.0) * (sigma2.max(0.0) / n_pair as f64).sqrt();
    (u - half, u + half)
}

fn summarise_trim(model: &StratumModel, trim: Option<&TrimReport>, rule: TrimPolicy) -> TrimSummary {
    TrimSummary {
        stratum: model.id.clone(),
        rule,
        removed_treated: trim.map_or(0, |t| t.removed_treated.len()),
        removed_control: trim.map_or(0, |t| t.removed_control.len()),
        n_treated: model.n_group(0),
        n_control: model.n_group(1),
    }
}

fn u_test(
    models: Vec<StratumModel>,
    trims: Vec<TrimSummary>,
    cfg: &TestConfig,
    seed: u64,
    adjusted: bool,
) -> Result<HeterogeneityReport> {
    let s_count = models.len();
    if s_count < 2 {
        return Err(Error::Dataset("at least two strata are required".into()));
    }
    let n_total: usize = models.iter().map(|m| m.n).sum();
    let root = RngStream::new(seed);
    let kernel_rng = root.substream(keys::KERNEL);
    let order = pair_index(s_count);
    let pairs = try_map_indexed(cfg.exec, order.len(), |r| {
        let (p, q) = order[r];
        let (mp, mq) = (&models[p], &models[q]);
        let mut rng = kernel_rng.substream(r as u64);
        let kernel = pairwise_kernel(pair_groups(mp, mq), cfg.kernel, n_total, &mut rng)?;
        pair_statistic(p, q, mp, mq, &kernel)
    })?;
    let sizes: Vec<[usize; 2]> = models.iter().map(|m| [m.n_group(0), m.n_group(1)]).collect();
    let cov = assemble_covariance(&pairs, &sizes)?;
    let u_vector: Vec<f64> = pairs.iter().map(|p| p.u_value).collect();
    let n = cov.n_total as f64;
    let t_a = n * u_vector.iter().map(|u| (u - 0.5) * (u - 0.5)).sum::<f64>();

    let ref_rng = root.substream(keys::REFERENCE);
    let (sample, jitter) = reference_sample(&cov.sigma_hat, cfg.reference_draws, &ref_rng, cfg.exec, squared_norm)?;
    let p_value = monte_carlo_pvalue(&sample, t_a);
    let max_statistic = if cfg.max_statistic {
        let stat = n.sqrt() * u_vector.iter().fold(0.0f64, |m, u| m.max((u - 0.5).abs()));
        let (sample, _) = reference_sample(&cov.sigma_hat, cfg.reference_draws, &ref_rng.substream(u64::MAX), cfg.exec, max_abs)?;
        Some(MaxStatistic {
            statistic: stat,
            p_value: monte_carlo_pvalue(&sample, stat),
        })
    } else {
        None
    };

    let pair_reports = pairs
        .iter()
        .map(|ps| {
            let (ci_lo, ci_hi) = pair_confidence_interval(ps.u_value, ps.sigma2, ps.n_pair, cfg.alpha);
            PairReport {
                p: ps.p + 1,
                q: ps.q + 1,
                p_id: models[ps.p].id.clone(),
                q_id: models[ps.q].id.clone(),
                u: ps.u_value,
                ci_lo,
                ci_hi,
                sigma2: ps.sigma2,
                n_pair: ps.n_pair,
                mode: ps.mode,
                n_eval: ps.n_eval,
            }
        })
        .collect();

    Ok(HeterogeneityReport {
        adjusted,
        num_strata: s_count,
        n_total,
        u_vector,
        sigma_hat: cov.sigma_hat.matrix().to_rows(),
        t_a,
        p_value,
        reject: p_value <= cfg.alpha,
        pairs: pair_reports,
        trim: trims,
        max_statistic,
        reference_jitter: jitter,
        config: *cfg,
        seed,
        pair_statistics: pairs,
        sigma_matrix: Some(cov.sigma_hat),
    })
}

/// Propensity-adjusted U test. Each stratum is fitted, trimmed and refitted
/// according to `cfg.trim`, then weighted with `cfg.h`.
pub fn adjusted_u_test(ds: &StratifiedDataset, cfg: &TestConfig, seed: u64) -> Result<HeterogeneityReport> {
    cfg.check()?;
    let prepared = try_map_indexed(cfg.exec, ds.num_strata(), |s| {
        let ws = prepare_stratum(&ds.strata()[s], cfg.h, cfg.trim)?;
        let model = StratumModel::adjusted(&ws)?;
        let summary = summarise_trim(&model, ws.trim.as_ref(), cfg.trim);
        Ok::<_, Error>((model, summary))
    })?;
    let (models, trims) = prepared.into_iter().unzip();
    u_test(models, trims, cfg, seed, true)
}

/// Same statistic with unit weights and no propensity model; `cfg.h` and
/// `cfg.trim` are ignored.
pub fn unadjusted_u_test(ds: &StratifiedDataset, cfg: &TestConfig, seed: u64) -> Result<HeterogeneityReport> {
    cfg.check()?;
    let models: Vec<StratumModel> = ds.strata().iter().map(StratumModel::unadjusted).collect();
    let trims = models
        .iter()
        .map(|m| summarise_trim(m, None, TrimPolicy::None))
        .collect();
    let cfg = TestConfig {
        trim: TrimPolicy::None,
        ..*cfg
    };
    u_test(models, trims, &cfg, seed, false)
}

#[derive(Debug, Clone, Serialize)]
pub struct LrtReport {
    #[serde(serialize_with = "serialize_vec")]
    pub tau: Vec<f64>,
    #[serde(serialize_with = "serialize_vec")]
    pub s2: Vec<f64>,
    #[serde(serialize_with = "serialize_f64")]
    pub tau_bar: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub statistic: f64,
    pub df: u32,
    #[serde(serialize_with = "serialize_f64")]
    pub p_value: f64,
    #[serde(serialize_with = "serialize_opt_f64", skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Inverse-variance homogeneity statistic from per-stratum estimates:
/// `H = Σ (τ̂_s - τ̄)² / s²_s` against `χ²_{S-1}`.
pub fn lrt_from_estimates(tau: Vec<f64>, s2: Vec<f64>) -> Result<LrtReport> {
    if tau.len() != s2.len() || tau.len() < 2 {
        return Err(Error::InvalidArgument("need at least two strata with one variance each".into()));
    }
    if s2.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::SingularDesign);
    }
    let wsum: f64 = s2.iter().map(|v| 1.0 / v).sum();
    let tau_bar = tau.iter().zip(&s2).map(|(t, v)| t / v).sum::<f64>() / wsum;
    let statistic: f64 = tau.iter().zip(&s2).map(|(t, v)| (t - tau_bar).powi(2) / v).sum();
    let df = (tau.len() - 1) as u32;
    Ok(LrtReport {
        p_value: chi2_sf(statistic, df),
        tau,
        s2,
        tau_bar,
        statistic,
        df,
        alpha: None,
    })
}

/// Per-stratum OLS of the outcome on `(1, T, covariates)`; the treatment
/// coefficients are compared with [`lrt_from_estimates`].
pub fn lrt_test(ds: &StratifiedDataset) -> Result<LrtReport> {
    let mut tau = Vec::with_capacity(ds.num_strata());
    let mut s2 = Vec::with_capacity(ds.num_strata());
    for s in ds.strata() {
        let x = s.covariates();
        let n = s.len();
        let d = x.cols();
        let mut design = Matrix::zeros(n, d + 1);
        for i in 0..n {
            let row = design.row_mut(i);
            row[0] = 1.0;
            row[1] = if s.treatment()[i] { 1.0 } else { 0.0 };
            row[2..].copy_from_slice(&x.row(i)[1..]);
        }
        let fit = ols_fit(&design, s.outcomes()).map_err(|e| e.in_stratum(s.id()))?;
        tau.push(fit.coefficients[1]);
        s2.push(fit.covariance[(1, 1)]);
    }
    lrt_from_estimates(tau, s2)
}
