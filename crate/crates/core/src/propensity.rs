//! Per-stratum logistic propensity models, balancing weights and their
//! derivatives in the model coefficients, and propensity-score trimming.

use serde::{Deserialize, Serialize};

use crate::data::{split_groups, GroupSplit, HFunction, Stratum};
use crate::error::{Error, Result};
use crate::numkit::linalg::{cholesky_gram, factor, Matrix};

/// Logistic fit `logit e(x) = βᵀx` for one stratum.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub beta: Vec<f64>,
    /// `e(X_i)` for every subject, in stratum row order.
    pub fitted: Vec<f64>,
    /// Score contributions `S_i = (T_i - e_i) X_i`, one row per subject.
    pub scores: Matrix,
    /// `J = -(1/n) Σ e_i (1 - e_i) X_i X_iᵀ`.
    pub jacobian: Matrix,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

const SEPARATION_EPS: f64 = 1e-10;
const MAX_BETA: f64 = 1e3;
const MAX_HALVINGS: usize = 30;

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let z = eta.exp();
        z / (1.0 + z)
    }
}

fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_likelihood(x: &Matrix, t: &[bool], beta: &[f64]) -> f64 {
    (0..x.rows())
        .map(|i| {
            let eta = dot(x.row(i), beta);
            (if t[i] { eta } else { 0.0 }) - softplus(eta)
        })
        .sum()
}

fn score_and_information(x: &Matrix, t: &[bool], beta: &[f64]) -> (Vec<f64>, Matrix, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let e: Vec<f64> = (0..n).map(|i| logistic(dot(x.row(i), beta))).collect();
    let mut g = vec![0.0; d];
    for i in 0..n {
        let r = (t[i] as u8 as f64) - e[i];
        for (gj, xj) in g.iter_mut().zip(x.row(i)) {
            *gj += r * xj;
        }
    }
    let w: Vec<f64> = e.iter().map(|p| p * (1.0 - p)).collect();
    (g, x.weighted_gram(Some(&w)), e)
}

fn near_boundary(e: &[f64]) -> bool {
    e.iter().any(|&p| p < SEPARATION_EPS || p > 1.0 - SEPARATION_EPS)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton–Raphson from `β = 0` with step halving whenever the
/// log-likelihood would decrease.
pub fn fit_logistic(s: &Stratum, opts: LogisticOptions) -> Result<PropensityFit> {
    let x = s.covariates();
    let t = s.treatment();
    let (n, d) = (x.rows(), x.cols());
    cholesky_gram(&x.weighted_gram(None))?;

    let mut beta = vec![0.0; d];
    let mut ll = log_likelihood(x, t, &beta);
    let separation = |beta: &[f64]| Error::Separation {
        max_abs_beta: max_abs(beta),
    };
    for iter in 1..=opts.max_iter {
        let (g, info, e) = score_and_information(x, t, &beta);
        let gnorm = max_abs(&g);
        if gnorm <= opts.tol * n as f64 {
            return finish(x, t, beta, iter - 1);
        }
        // Fisher information is positive definite for a full-rank design
        // unless the fitted probabilities have collapsed onto {0, 1}.
        let chol = match factor(&info, 0.0, 1e-14) {
            Some(lower) => crate::numkit::Cholesky { lower, jitter: 0.0 },
            None if near_boundary(&e) => return Err(separation(&beta)),
            None => return Err(Error::SingularDesign),
        };
        let step = chol.solve(&g);
        let mut scale = 1.0;
        let mut candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
        let mut cand_ll = log_likelihood(x, t, &candidate);
        let mut halvings = 0;
        while !(cand_ll >= ll) && halvings < MAX_HALVINGS {
            scale *= 0.5;
            candidate = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            cand_ll = log_likelihood(x, t, &candidate);
            halvings += 1;
        }
        if !(cand_ll >= ll) {
            // No ascent along the Newton direction: stationary to machine precision.
            if gnorm <= 1e-8 * n as f64 {
                return finish(x, t, beta, iter);
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                beta,
                grad_norm: gnorm,
            });
        }
        let moved = max_abs(&step) * scale;
        beta = candidate;
        ll = cand_ll;
        if max_abs(&beta) > MAX_BETA {
            return Err(separation(&beta));
        }
        if moved <= 1e-14 * (1.0 + max_abs(&beta)) {
            let (g, _, _) = score_and_information(x, t, &beta);
            if max_abs(&g) <= 1e-8 * n as f64 {
                return finish(x, t, beta, iter);
            }
        }
    }
    let (g, _, e) = score_and_information(x, t, &beta);
    if near_boundary(&e) {
        return Err(separation(&beta));
    }
    let grad_norm = max_abs(&g);
    if grad_norm <= opts.tol * n as f64 {
        return finish(x, t, beta, opts.max_iter);
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        beta,
        grad_norm,
    })
}

fn finish(x: &Matrix, t: &[bool], beta: Vec<f64>, iterations: usize) -> Result<PropensityFit> {
    let (n, d) = (x.rows(), x.cols());
    let fitted: Vec<f64> = (0..n).map(|i| logistic(dot(x.row(i), &beta))).collect();
    if near_boundary(&fitted) {
        return Err(Error::Separation {
            max_abs_beta: max_abs(&beta),
        });
    }
    let mut scores = Matrix::zeros(n, d);
    for i in 0..n {
        let r = (t[i] as u8 as f64) - fitted[i];
        for (s, xj) in scores.row_mut(i).iter_mut().zip(x.row(i)) {
            *s = r * xj;
        }
    }
    let w: Vec<f64> = fitted.iter().map(|p| -p * (1.0 - p) / n as f64).collect();
    let jacobian = x.weighted_gram(Some(&w));
    Ok(PropensityFit {
        beta,
        fitted,
        scores,
        jacobian,
        converged: true,
        iterations,
    })
}

/// Balancing weight of one subject and its gradient in `β`:
/// `w = h(e)/e` (treated) or `h(e)/(1-e)` (control), and
/// `∂w/∂β = (dw/de) e (1-e) x`.
pub fn weight_with_gradient(h: HFunction, e: f64, x: &[f64], treated: bool) -> (f64, Vec<f64>) {
    let (hv, hd) = (h.value(e), h.derivative(e));
    let (w, dw_de) = if treated {
        (hv / e, (hd * e - hv) / (e * e))
    } else {
        let c = 1.0 - e;
        (hv / c, (hd * c + hv) / (c * c))
    };
    let k = dw_de * e * (1.0 - e);
    (w, x.iter().map(|xj| k * xj).collect())
}

/// Weights for the treated and control subjects of one stratum (in
/// [`GroupSplit`] order) together with their `β`-gradients.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub h: HFunction,
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
    pub grad_treated: Matrix,
    pub grad_control: Matrix,
    pub mean_treated: f64,
    pub mean_control: f64,
}

pub fn compute_weights(s: &Stratum, fit: &PropensityFit, groups: &GroupSplit, h: HFunction) -> WeightSet {
    let x = s.covariates();
    let d = x.cols();
    let build = |idx: &[usize], treated: bool| {
        let mut w = Vec::with_capacity(idx.len());
        let mut g = Matrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            let (wi, gi) = weight_with_gradient(h, fit.fitted[i], x.row(i), treated);
            w.push(wi);
            g.row_mut(r).copy_from_slice(&gi);
        }
        (w, g)
    };
    let (treated, grad_treated) = build(&groups.treated, true);
    let (control, grad_control) = build(&groups.control, false);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    WeightSet {
        h,
        mean_treated: mean(&treated),
        mean_control: mean(&control),
        treated,
        control,
        grad_treated,
        grad_control,
    }
}

/// Which trimming rules to apply before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum TrimPolicy {
    None,
    #[default]
    Overlap,
    Hard { gamma: f64 },
    Both { gamma: f64 },
}

impl TrimPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            TrimPolicy::None => "none",
            TrimPolicy::Overlap => "overlap",
            TrimPolicy::Hard { .. } => "hard",
            TrimPolicy::Both { .. } => "both",
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            TrimPolicy::Hard { gamma } | TrimPolicy::Both { gamma } => Some(gamma),
            _ => None,
        }
    }
}

/// Outcome of trimming one stratum. Indices refer to rows of the original
/// stratum.
#[derive(Debug, Clone)]
pub struct TrimReport {
    pub rule: TrimPolicy,
    pub removed_treated: Vec<usize>,
    pub removed_control: Vec<usize>,
    pub retained: Vec<usize>,
    pub stratum: Stratum,
    pub refit: PropensityFit,
}

impl TrimReport {
    pub fn removed(&self) -> usize {
        self.removed_treated.len() + self.removed_control.len()
    }
}

/// Overlap rule: control subjects below the smallest treated propensity and
/// treated subjects above the largest control propensity are removed.
pub fn overlap_removals(e: &[f64], treatment: &[bool]) -> Vec<bool> {
    let min_t = e
        .iter()
        .zip(treatment)
        .filter(|(_, &t)| t)
        .map(|(&p, _)| p)
        .fold(f64::INFINITY, f64::min);
    let max_c = e
        .iter()
        .zip(treatment)
        .filter(|(_, &t)| !t)
        .map(|(&p, _)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    e.iter()
        .zip(treatment)
        .map(|(&p, &t)| if t { p > max_c } else { p < min_t })
        .collect()
}

/// Hard threshold: propensities outside `[gamma, 1 - gamma]` are removed.
pub fn hard_removals(e: &[f64], gamma: f64) -> Vec<bool> {
    e.iter().map(|&p| p < gamma || p > 1.0 - gamma).collect()
}

fn apply_trim(s: &Stratum, fit: &PropensityFit, rule: TrimPolicy, remove: Vec<bool>) -> Result<TrimReport> {
    let t = s.treatment();
    let mut removed_treated = Vec::new();
    let mut removed_control = Vec::new();
    let mut retained = Vec::new();
    for (i, &r) in remove.iter().enumerate() {
        match (r, t[i]) {
            (true, true) => removed_treated.push(i),
            (true, false) => removed_control.push(i),
            (false, _) => retained.push(i),
        }
    }
    let n_treated = s.n_treated() - removed_treated.len();
    let n_control = s.n_control() - removed_control.len();
    if n_treated < 2 || n_control < 2 {
        return Err(Error::TrimInfeasible {
            stratum: s.id().to_string(),
            n_treated,
            n_control,
        });
    }
    let (stratum, refit) = if removed_treated.is_empty() && removed_control.is_empty() {
        (s.clone(), fit.clone())
    } else {
        let kept = s.subset(&retained)?;
        let refit = fit_logistic(&kept, LogisticOptions::default())?;
        (kept, refit)
    };
    Ok(TrimReport {
        rule,
        removed_treated,
        removed_control,
        retained,
        stratum,
        refit,
    })
}

pub fn trim_overlap(s: &Stratum, fit: &PropensityFit) -> Result<TrimReport> {
    let remove = overlap_removals(&fit.fitted, s.treatment());
    apply_trim(s, fit, TrimPolicy::Overlap, remove)
}

pub fn trim_hard(s: &Stratum, fit: &PropensityFit, gamma: f64) -> Result<TrimReport> {
    check_gamma(gamma)?;
    let remove = hard_removals(&fit.fitted, gamma);
    apply_trim(s, fit, TrimPolicy::Hard { gamma }, remove)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("trim gamma must lie in (0, 1/2), got {gamma}")))
    }
}

/// Apply `policy` (both rules are evaluated on the same fitted propensities
/// when combined) and refit on the retained subjects. `None` for no trimming.
pub fn trim(s: &Stratum, fit: &PropensityFit, policy: TrimPolicy) -> Result<Option<TrimReport>> {
    match policy {
        TrimPolicy::None => Ok(None),
        TrimPolicy::Overlap => trim_overlap(s, fit).map(Some),
        TrimPolicy::Hard { gamma } => trim_hard(s, fit, gamma).map(Some),
        TrimPolicy::Both { gamma } => {
            check_gamma(gamma)?;
            let a = overlap_removals(&fit.fitted, s.treatment());
            let b = hard_removals(&fit.fitted, gamma);
            let remove = a.iter().zip(&b).map(|(x, y)| *x || *y).collect();
            apply_trim(s, fit, policy, remove).map(Some)
        }
    }
}

/// Fitted model, weights and group split for one (possibly trimmed) stratum.
#[derive(Debug, Clone)]
pub struct WeightedStratum {
    pub stratum: Stratum,
    pub fit: PropensityFit,
    pub groups: GroupSplit,
    pub weights: WeightSet,
    pub trim: Option<TrimReport>,
}

/// Fit, optionally trim and refit, then weight.
pub fn prepare_stratum(s: &Stratum, h: HFunction, policy: TrimPolicy) -> Result<WeightedStratum> {
    let fit = fit_logistic(s, LogisticOptions::default()).map_err(|e| e.in_stratum(s.id()))?;
    let report = trim(s, &fit, policy).map_err(|e| e.in_stratum(s.id()))?;
    let (stratum, fit) = match &report {
        Some(r) => (r.stratum.clone(), r.refit.clone()),
        None => (s.clone(), fit),
    };
    let groups = split_groups(&stratum);
    let weights = compute_weights(&stratum, &fit, &groups, h);
    Ok(WeightedStratum {
        stratum,
        fit,
        groups,
        weights,
        trim: report,
    })
}
