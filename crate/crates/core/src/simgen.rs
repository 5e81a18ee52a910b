//! Simulation scenarios and a replication runner for validity, power and
//! sensitivity studies.
//!
//! Every replication of a cell draws its data from a substream keyed by the
//! scenario with the effect size left out, so cells that differ only in `Δ`
//! see the same confounders, assignments and errors.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::Serialize;

use crate::data::{HFunction, StratifiedDataset, Stratum};
use crate::error::{Error, Result};
use crate::inference::{adjusted_u_test, lrt_test, unadjusted_u_test, TestConfig};
use crate::numkit::linalg::Matrix;
use crate::numkit::rng::keys;
use crate::numkit::RngStream;
use crate::par::{map_indexed, Exec};
use crate::propensity::{logistic, TrimPolicy};
use crate::report::{serialize_f64, serialize_vec};
use crate::ustat::KernelPolicy;

const MAX_REGENERATIONS: usize = 100;
const FAIL_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorDist {
    /// `N(0, 1)`.
    Normal,
    /// `U(-2, 2)`.
    Uniform,
    /// Student t with 4 degrees of freedom.
    T4,
    /// `½ N(-5, 1) + ½ N(5, 1)`.
    Bimodal,
}

impl ErrorDist {
    pub const ALL: [ErrorDist; 4] = [ErrorDist::Normal, ErrorDist::Uniform, ErrorDist::T4, ErrorDist::Bimodal];

    pub fn name(self) -> &'static str {
        match self {
            ErrorDist::Normal => "normal",
            ErrorDist::Uniform => "uniform",
            ErrorDist::T4 => "t4",
            ErrorDist::Bimodal => "bimodal",
        }
    }

    pub fn variance(self) -> f64 {
        match self {
            ErrorDist::Normal => 1.0,
            ErrorDist::Uniform => 4.0 / 3.0,
            ErrorDist::T4 => 2.0,
            ErrorDist::Bimodal => 26.0,
        }
    }

    pub fn sample(self, rng: &mut RngStream) -> f64 {
        match self {
            ErrorDist::Normal => rng.normal(),
            ErrorDist::Uniform => rng.uniform_range(-2.0, 2.0),
            ErrorDist::T4 => {
                let chi2: f64 = (0..4).map(|_| rng.normal().powi(2)).sum();
                rng.normal() / (chi2 / 4.0).sqrt()
            }
            ErrorDist::Bimodal => {
                let centre = if rng.bernoulli(0.5) { 5.0 } else { -5.0 };
                centre + rng.normal()
            }
        }
    }

    fn key(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ErrorDist::ALL
            .into_iter()
            .find(|e| e.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown error distribution '{s}' (normal, uniform, t4, bimodal)")))
    }
}

/// Confounder distribution of one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ZDist {
    Normal { sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl ZDist {
    fn sample(self, rng: &mut RngStream) -> f64 {
        match self {
            ZDist::Normal { sd } => sd * rng.normal(),
            ZDist::Uniform { lo, hi } => rng.uniform_range(lo, hi),
        }
    }
}

/// Three strata with `logit e = γ_s Z`, `Y = 1 + β_s T + Z + ε` and
/// `β = (1, 1 + Δ, 1 + 2Δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerScenario {
    pub n: usize,
    pub delta: f64,
    pub error: ErrorDist,
    pub gamma: [f64; 3],
    pub z: [ZDist; 3],
}

impl PowerScenario {
    pub fn new(n: usize, delta: f64, error: ErrorDist) -> Result<Self> {
        if n < 20 {
            return Err(Error::InvalidArgument(format!("n must be at least 20, got {n}")));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be non-negative, got {delta}")));
        }
        Ok(PowerScenario {
            n,
            delta,
            error,
            gamma: [1.0, -1.0, 1.0],
            z: [
                ZDist::Normal { sd: 1.0 },
                ZDist::Normal { sd: 1.0 },
                ZDist::Uniform { lo: -0.5, hi: 0.5 },
            ],
        })
    }

    pub fn beta_t(&self) -> [f64; 3] {
        [1.0, 1.0 + self.delta, 1.0 + 2.0 * self.delta]
    }

    pub fn generate(&self, rng: &RngStream) -> Result<StratifiedDataset> {
        let beta = self.beta_t();
        let strata = (0..3)
            .map(|s| {
                generate_stratum(rng.substream(s as u64), s, self.n, |r| {
                    let z = self.z[s].sample(r);
                    let t = r.bernoulli(logistic(self.gamma[s] * z));
                    let eps = self.error.sample(r);
                    let y = 1.0 + if t { beta[s] } else { 0.0 } + z + eps;
                    (y, t, vec![z])
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StratifiedDataset::new(strata, vec!["z".into()])
    }
}

/// Quadratic confounding that the analysis model leaves out:
/// `logit e = γ₀ + Z + γ₂ Z²`, `Y = T + Z + β₂ Z² + ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityScenario {
    pub n: usize,
    pub error: ErrorDist,
    pub beta2: [f64; 3],
    pub gamma0: [f64; 3],
    pub gamma2: [f64; 3],
    pub z: [ZDist; 3],
    /// Expose `Z²` to the analysis as well (correctly specified control).
    pub include_quadratic: bool,
}

impl SensitivityScenario {
    pub fn new(error: ErrorDist) -> Self {
        SensitivityScenario {
            n: 200,
            error,
            beta2: [2.0, -2.0, 2.0],
            gamma0: [-0.5, 0.5, 0.5],
            gamma2: [2.0, -2.0, 2.0],
            z: [
                ZDist::Normal { sd: 0.5 },
                ZDist::Normal { sd: 0.5 },
                ZDist::Uniform { lo: -2.0, hi: 2.0 },
            ],
            include_quadratic: false,
        }
    }

    pub fn generate(&self, rng: &RngStream) -> Result<StratifiedDataset> {
        let strata = (0..3)
            .map(|s| {
                generate_stratum(rng.substream(s as u64), s, self.n, |r| {
                    let z = self.z[s].sample(r);
                    let t = r.bernoulli(logistic(self.gamma0[s] + z + self.gamma2[s] * z * z));
                    let eps = self.error.sample(r);
                    let y = if t { 1.0 } else { 0.0 } + z + self.beta2[s] * z * z + eps;
                    let x = if self.include_quadratic { vec![z, z * z] } else { vec![z] };
                    (y, t, x)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let names = if self.include_quadratic {
            vec!["z".into(), "z2".into()]
        } else {
            vec!["z".into()]
        };
        StratifiedDataset::new(strata, names)
    }
}

/// Draw `n` subjects, redrawing the whole stratum while a group has fewer
/// than two members.
fn generate_stratum<F>(base: RngStream, s: usize, n: usize, mut draw: F) -> Result<Stratum>
where
    F: FnMut(&mut RngStream) -> (f64, bool, Vec<f64>),
{
    for attempt in 0..MAX_REGENERATIONS {
        let mut rng = base.substream(attempt as u64);
        let mut y = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut x = Vec::new();
        let mut d = 0;
        for _ in 0..n {
            let (yi, ti, xi) = draw(&mut rng);
            d = xi.len();
            y.push(yi);
            t.push(ti);
            x.extend(xi);
        }
        let treated = t.iter().filter(|&&b| b).count();
        if treated >= 2 && n - treated >= 2 {
            return Stratum::with_intercept(format!("s{}", s + 1), y, t, &Matrix::from_vec(n, d, x));
        }
    }
    Err(Error::DegenerateScenario {
        attempts: MAX_REGENERATIONS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scenario {
    Power(PowerScenario),
    Sensitivity(SensitivityScenario),
}

impl Scenario {
    pub fn generate(&self, rng: &RngStream) -> Result<StratifiedDataset> {
        match self {
            Scenario::Power(p) => p.generate(rng),
            Scenario::Sensitivity(s) => s.generate(rng),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Power(_) => "power",
            Scenario::Sensitivity(_) => "sensitivity",
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Scenario::Power(p) => p.n,
            Scenario::Sensitivity(s) => s.n,
        }
    }

    pub fn delta(&self) -> f64 {
        match self {
            Scenario::Power(p) => p.delta,
            Scenario::Sensitivity(_) => 0.0,
        }
    }

    pub fn error(&self) -> ErrorDist {
        match self {
            Scenario::Power(p) => p.error,
            Scenario::Sensitivity(s) => s.error,
        }
    }

    /// Data-stream key; the effect size is deliberately not part of it.
    fn data_key(&self) -> [u64; 3] {
        match self {
            Scenario::Power(p) => [1, p.n as u64, p.error.key()],
            Scenario::Sensitivity(s) => [2 + s.include_quadratic as u64, s.n as u64, s.error.key()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    #[serde(rename = "AUT")]
    Aut,
    #[serde(rename = "AUT-T")]
    AutT,
    #[serde(rename = "U")]
    Unadjusted,
    #[serde(rename = "LRT")]
    Lrt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Aut, Method::AutT, Method::Unadjusted, Method::Lrt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Aut => "AUT",
            Method::AutT => "AUT-T",
            Method::Unadjusted => "U",
            Method::Lrt => "LRT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub reps: usize,
    pub alpha: f64,
    pub h: HFunction,
    pub kernel: KernelPolicy,
    pub reference_draws: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl ExperimentConfig {
    /// 500 replications, `m = 200 N`, `L = 2·10⁴`.
    pub fn desk(seed: u64) -> Self {
        ExperimentConfig {
            reps: 500,
            alpha: 0.05,
            h: HFunction::One,
            kernel: KernelPolicy::auto_per_subject(200),
            reference_draws: 20_000,
            seed,
            exec: Exec::Parallel,
        }
    }

    /// 2000 replications, `m = 1000 N`, `L = 10⁵`.
    pub fn full(seed: u64) -> Self {
        ExperimentConfig {
            reps: 2000,
            kernel: KernelPolicy::auto_per_subject(1000),
            reference_draws: 100_000,
            ..Self::desk(seed)
        }
    }

    fn test_config(&self, trim: TrimPolicy) -> TestConfig {
        TestConfig {
            h: self.h,
            trim,
            kernel: self.kernel,
            reference_draws: self.reference_draws,
            alpha: self.alpha,
            max_statistic: false,
            exec: Exec::Sequential,
        }
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub statistic: f64,
    pub p_value: f64,
    /// Removed fraction per stratum (trimmed methods).
    pub trim_fraction: Vec<f64>,
    pub trim_removed: Vec<usize>,
}

/// Run one method on one dataset; `seed` drives kernel sampling and
/// reference draws.
pub fn run_method(ds: &StratifiedDataset, method: Method, cfg: &ExperimentConfig, seed: u64) -> Result<RepOutcome> {
    let from_u = |r: crate::inference::HeterogeneityReport| {
        let removed: Vec<usize> = r.trim.iter().map(|t| t.removed_treated + t.removed_control).collect();
        let fraction = r
            .trim
            .iter()
            .zip(&removed)
            .map(|(t, &k)| k as f64 / (k + t.n_treated + t.n_control) as f64)
            .collect();
        RepOutcome {
            statistic: r.t_a,
            p_value: r.p_value,
            trim_fraction: fraction,
            trim_removed: removed,
        }
    };
    match method {
        Method::Aut => adjusted_u_test(ds, &cfg.test_config(TrimPolicy::None), seed).map(from_u),
        Method::AutT => adjusted_u_test(ds, &cfg.test_config(TrimPolicy::Overlap), seed).map(from_u),
        Method::Unadjusted => unadjusted_u_test(ds, &cfg.test_config(TrimPolicy::None), seed).map(from_u),
        Method::Lrt => lrt_test(ds).map(|r| RepOutcome {
            statistic: r.statistic,
            p_value: r.p_value,
            trim_fraction: Vec::new(),
            trim_removed: Vec::new(),
        }),
    }
}

/// Aggregated result of one (scenario, method) cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub scenario: &'static str,
    pub n: usize,
    #[serde(serialize_with = "serialize_f64")]
    pub delta: f64,
    pub error: ErrorDist,
    pub method: Method,
    #[serde(serialize_with = "serialize_f64")]
    pub alpha: f64,
    pub n_reps: usize,
    pub error_count: usize,
    pub failed: bool,
    #[serde(serialize_with = "serialize_f64")]
    pub reject_rate: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub mean_stat: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub var_stat: f64,
    /// Mean number of removed subjects per stratum.
    #[serde(serialize_with = "serialize_vec")]
    pub trim_mean_removed: Vec<f64>,
    /// Mean removed fraction per stratum.
    #[serde(serialize_with = "serialize_vec")]
    pub trim_mean_fraction: Vec<f64>,
    #[serde(serialize_with = "serialize_vec")]
    pub p_values: Vec<f64>,
    #[serde(serialize_with = "serialize_vec")]
    pub statistics: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentTable {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    (crate::numkit::mean(xs), crate::numkit::sample_variance(xs))
}

fn aggregate(scenario: &Scenario, method: Method, cfg: &ExperimentConfig, outcomes: Vec<Result<RepOutcome>>) -> CellResult {
    let n_reps = outcomes.len();
    let ok: Vec<RepOutcome> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let error_count = n_reps - ok.len();
    let p_values: Vec<f64> = ok.iter().map(|o| o.p_value).collect();
    let statistics: Vec<f64> = ok.iter().map(|o| o.statistic).collect();
    let rejections = p_values.iter().filter(|&&p| p <= cfg.alpha).count();
    let (mean_stat, var_stat) = mean_var(&statistics);
    let strata = ok.iter().map(|o| o.trim_removed.len()).max().unwrap_or(0);
    let column_mean = |f: &dyn Fn(&RepOutcome, usize) -> f64| -> Vec<f64> {
        (0..strata)
            .map(|s| ok.iter().map(|o| f(o, s)).sum::<f64>() / ok.len() as f64)
            .collect()
    };
    CellResult {
        scenario: scenario.name(),
        n: scenario.n(),
        delta: scenario.delta(),
        error: scenario.error(),
        method,
        alpha: cfg.alpha,
        n_reps,
        error_count,
        failed: error_count as f64 > FAIL_FRACTION * n_reps as f64,
        reject_rate: if ok.is_empty() { f64::NAN } else { rejections as f64 / ok.len() as f64 },
        mean_stat,
        var_stat,
        trim_mean_removed: column_mean(&|o, s| o.trim_removed[s] as f64),
        trim_mean_fraction: column_mean(&|o, s| o.trim_fraction[s]),
        p_values,
        statistics,
    }
}

/// Run every method on `cfg.reps` replications of every scenario. Failed
/// replications are counted per cell and excluded; a cell is marked failed
/// when more than 10% of its replications error.
pub fn run_experiment(scenarios: &[Scenario], methods: &[Method], cfg: &ExperimentConfig) -> ExperimentTable {
    let root = RngStream::new(cfg.seed);
    let data_root = root.substream(keys::DATA);
    let method_root = root.substream(keys::METHOD);
    let jobs = scenarios.len() * cfg.reps;
    let results: Vec<Vec<Result<RepOutcome>>> = map_indexed(cfg.exec, jobs, |job| {
        let (c, rep) = (job / cfg.reps, job % cfg.reps);
        let sc = &scenarios[c];
        let key = sc.data_key();
        let data_rng = data_root.substream_path(&[key[0], key[1], key[2], rep as u64]);
        match sc.generate(&data_rng) {
            Ok(ds) => methods
                .iter()
                .map(|&m| {
                    let seed = method_root.substream_path(&[key[0], key[1], key[2], rep as u64]).next_u64();
                    run_method(&ds, m, cfg, seed)
                })
                .collect(),
            Err(e) => methods.iter().map(|_| Err(Error::Dataset(e.to_string()))).collect(),
        }
    });
    let mut cells = Vec::with_capacity(scenarios.len() * methods.len());
    let mut iter = results.into_iter();
    for sc in scenarios {
        let mut per_method: Vec<Vec<Result<RepOutcome>>> = methods.iter().map(|_| Vec::with_capacity(cfg.reps)).collect();
        for _ in 0..cfg.reps {
            for (m, r) in iter.next().unwrap().into_iter().enumerate() {
                per_method[m].push(r);
            }
        }
        for (m, outcomes) in per_method.into_iter().enumerate() {
            cells.push(aggregate(sc, methods[m], cfg, outcomes));
        }
    }
    ExperimentTable {
        seed: cfg.seed,
        config: *cfg,
        cells,
    }
}

impl ExperimentTable {
    pub const TSV_HEADER: &'static str = "scenario\tn\tdelta\terror\tmethod\talpha\tn_reps\treject_rate\tmean_stat\tvar_stat\ttrim_mean_removed\ttrim_mean_fraction\terror_count\tfailed";

    pub fn to_tsv(&self) -> String {
        use crate::report::fmt17;
        let join = |v: &[f64]| v.iter().map(|x| fmt17(*x)).collect::<Vec<_>>().join(",");
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                c.scenario,
                c.n,
                fmt17(c.delta),
                c.error,
                c.method,
                fmt17(c.alpha),
                c.n_reps,
                fmt17(c.reject_rate),
                fmt17(c.mean_stat),
                fmt17(c.var_stat),
                join(&c.trim_mean_removed),
                join(&c.trim_mean_fraction),
                c.error_count,
                c.failed
            ));
        }
        out
    }

    pub fn cell(&self, delta: f64, error: ErrorDist, method: Method) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.delta == delta && c.error == error && c.method == method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Validity,
    Power,
    Sensitivity,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Validity, Preset::Power, Preset::Sensitivity];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Validity => "validity",
            Preset::Power => "power",
            Preset::Sensitivity => "sensitivity",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown preset '{s}'; available presets: validity, power, sensitivity"))
        })
    }
}

pub const POWER_DELTAS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

/// Scenario grid and methods of a preset. `error` restricts the error
/// distributions (all four when `None`; validity uses normal errors by
/// default).
pub fn preset_grid(preset: Preset, n: Option<usize>, error: Option<ErrorDist>) -> Result<(Vec<Scenario>, Vec<Method>)> {
    let errors: Vec<ErrorDist> = error.map_or_else(|| ErrorDist::ALL.to_vec(), |e| vec![e]);
    let n = n.unwrap_or(200);
    Ok(match preset {
        Preset::Validity => (
            vec![Scenario::Power(PowerScenario::new(n, 0.0, error.unwrap_or(ErrorDist::Normal))?)],
            Method::ALL.to_vec(),
        ),
        Preset::Power => {
            let mut cells = Vec::new();
            for &e in &errors {
                for &d in &POWER_DELTAS {
                    cells.push(Scenario::Power(PowerScenario::new(n, d, e)?));
                }
            }
            (cells, vec![Method::Aut, Method::AutT, Method::Lrt])
        }
        Preset::Sensitivity => {
            let cells = errors
                .iter()
                .map(|&e| {
                    let mut sc = SensitivityScenario::new(e);
                    sc.n = n;
                    Scenario::Sensitivity(sc)
                })
                .collect();
            (cells, vec![Method::Aut, Method::AutT, Method::Lrt])
        }
    })
}
