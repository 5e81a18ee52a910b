//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use strata_u::data::{HFunction, StratifiedDataset, Stratum};
use strata_u::inference::{
    adjusted_u_test, lrt_from_estimates, lrt_test, reference_sample, squared_norm, TestConfig,
};
use strata_u::numkit::linalg::{Matrix, SpdMatrix};
use strata_u::numkit::{chi2_cdf, normal_cdf, sample_variance, RngStream};
use strata_u::propensity::{logistic, weight_with_gradient, TrimPolicy};
use strata_u::simgen::{
    preset_grid, run_experiment, ErrorDist, ExperimentConfig, ExperimentTable, Method, PowerScenario, Preset,
    Scenario,
};
use strata_u::ustat::{
    kernel_phi, pairwise_adjusted_u_exact, pairwise_sampled, KernelPolicy, SampleSize, WeightedGroup,
};
use strata_u::Exec;

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// One-sample Kolmogorov-Smirnov distance.
fn ks_distance(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn validity_table(reps: usize) -> ExperimentTable {
    let cfg = ExperimentConfig {
        reps,
        ..ExperimentConfig::desk(SEED)
    };
    let (cells, _) = preset_grid(Preset::Validity, Some(200), Some(ErrorDist::Normal)).unwrap();
    run_experiment(&cells, &[Method::Aut, Method::AutT, Method::Unadjusted], &cfg)
}

fn criterion_1(table: &ExperimentTable) -> Outcome {
    let aut = table.cell(0.0, ErrorDist::Normal, Method::Aut).unwrap();
    let autt = table.cell(0.0, ErrorDist::Normal, Method::AutT).unwrap();
    let ok = |r: f64| (0.03..=0.09).contains(&r);
    outcome(
        ok(aut.reject_rate) && ok(autt.reject_rate) && !aut.failed && !autt.failed,
        format!(
            "AUT={:.3} AUT-T={:.3} over {} reps (errors {}/{})",
            aut.reject_rate, autt.reject_rate, aut.n_reps, aut.error_count, autt.error_count
        ),
    )
}

fn criterion_2(table: &ExperimentTable) -> Outcome {
    let u = table.cell(0.0, ErrorDist::Normal, Method::Unadjusted).unwrap();
    let p = &u.p_values[..200.min(u.p_values.len())];
    let rate = p.iter().filter(|&&x| x <= 0.05).count() as f64 / p.len() as f64;
    outcome(rate > 0.95, format!("unadjusted rejection {rate:.3} over {} reps", p.len()))
}

fn criterion_3(table: &ExperimentTable) -> Outcome {
    let aut = table.cell(0.0, ErrorDist::Normal, Method::Aut).unwrap();
    let d = ks_distance(&aut.p_values, |x| x.clamp(0.0, 1.0));
    outcome(d < 0.08, format!("KS={d:.4} over {} p-values", aut.p_values.len()))
}

/// The power comparison is made at the smallest sample size of the grid
/// (and then the smallest effect size) where both methods have power
/// strictly inside (0.2, 0.9).
fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig::desk(SEED + 4);
    let deltas = [0.25, 0.5];
    let sizes = [200, 300, 400, 500];
    let inside = |x: f64| x > 0.2 && x < 0.9;
    let mut details = Vec::new();
    let mut pass = true;
    for (error, aut_wins) in [(ErrorDist::Bimodal, true), (ErrorDist::Normal, false)] {
        let mut grid = Vec::new();
        let mut chosen = None;
        for &n in &sizes {
            let cells: Vec<Scenario> = deltas
                .iter()
                .map(|&d| Scenario::Power(PowerScenario::new(n, d, error).unwrap()))
                .collect();
            let table = run_experiment(&cells, &[Method::Aut, Method::Lrt], &cfg);
            for &d in &deltas {
                let a = table.cell(d, error, Method::Aut).unwrap().reject_rate;
                let l = table.cell(d, error, Method::Lrt).unwrap().reject_rate;
                grid.push(format!("n={n} Δ={d}: AUT={a:.3} LRT={l:.3}"));
                if chosen.is_none() && inside(a) && inside(l) {
                    chosen = Some((n, d, a, l));
                }
            }
            if chosen.is_some() {
                break;
            }
        }
        match chosen {
            Some((n, d, a, l)) => {
                pass &= if aut_wins { a >= l } else { l >= a };
                details.push(format!("{error} [{}] -> compared at n={n} Δ={d}", grid.join(", ")));
            }
            None => {
                pass = false;
                details.push(format!("{error} [{}] -> no cell with both powers in (0.2, 0.9)", grid.join(", ")));
            }
        }
    }
    outcome(pass, details.join("; "))
}

fn brute_u(g: [&WeightedGroup; 4]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..g[0].len() {
        for j in 0..g[1].len() {
            for k in 0..g[2].len() {
                for l in 0..g[3].len() {
                    let w = g[0].weights[i] * g[1].weights[j] * g[2].weights[k] * g[3].weights[l];
                    num += w * kernel_phi(g[0].outcomes[i], g[1].outcomes[j], g[2].outcomes[k], g[3].outcomes[l]);
                    den += w;
                }
            }
        }
    }
    num / den
}

fn criterion_5() -> Outcome {
    let mut rng = RngStream::new(SEED + 5);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let discrete = inst % 2 == 0;
        let groups: [WeightedGroup; 4] = std::array::from_fn(|_| {
            let n = 1 + rng.index(6);
            let y = (0..n)
                .map(|_| if discrete { rng.index(3) as f64 } else { rng.normal() })
                .collect();
            let w = (0..n).map(|_| 0.1 + 4.0 * rng.uniform()).collect();
            WeightedGroup::new(y, w)
        });
        let refs = [&groups[0], &groups[1], &groups[2], &groups[3]];
        let exact = pairwise_adjusted_u_exact(refs).unwrap();
        let brute = brute_u(refs);
        worst = worst.max((exact - brute).abs() / brute.abs().max(f64::MIN_POSITIVE));
    }
    let groups: [WeightedGroup; 4] = std::array::from_fn(|_| {
        WeightedGroup::new(
            (0..3).map(|_| rng.normal()).collect(),
            (0..3).map(|_| 0.5 + rng.uniform()).collect(),
        )
    });
    let refs = [&groups[0], &groups[1], &groups[2], &groups[3]];
    let exact = pairwise_adjusted_u_exact(refs).unwrap();
    let sampled = pairwise_sampled(refs, &mut RngStream::new(SEED + 55), 1_000_000).unwrap().u_value;
    let gap = (sampled - exact).abs();
    outcome(
        worst <= 1e-12 && gap < 0.005,
        format!("max relative error {worst:.2e}; sampled-exact gap {gap:.5}"),
    )
}

/// Unweighted four-sample statistic by direct counting.
fn ds_u(p: &Stratum, q: &Stratum) -> f64 {
    let split = |s: &Stratum| {
        let (mut t, mut c) = (Vec::new(), Vec::new());
        for (y, &tr) in s.outcomes().iter().zip(s.treatment()) {
            if tr { t.push(*y) } else { c.push(*y) }
        }
        (t, c)
    };
    let ((pt, pc), (qt, qc)) = (split(p), split(q));
    let mut count = 0.0;
    for a in &pt {
        for b in &pc {
            for c in &qt {
                for d in &qc {
                    count += kernel_phi(*a, *b, *c, *d);
                }
            }
        }
    }
    count / (pt.len() * pc.len() * qt.len() * qc.len()) as f64
}

fn criterion_6() -> Outcome {
    let mut rng = RngStream::new(SEED + 6);
    let cfg = TestConfig {
        h: HFunction::One,
        trim: TrimPolicy::None,
        kernel: KernelPolicy::Exact,
        reference_draws: 1000,
        ..TestConfig::default()
    };
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for rep in 0..20 {
        let s_count = 2 + rep % 3;
        let strata: Vec<Stratum> = (0..s_count)
            .map(|s| {
                let n = 8 + rng.index(20);
                let mut t: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                for i in 4..n {
                    t[i] = rng.bernoulli(0.4);
                }
                let y = (0..n)
                    .map(|_| if rep % 2 == 0 { rng.index(5) as f64 } else { rng.normal() })
                    .collect();
                Stratum::with_intercept(format!("s{s}"), y, t, &Matrix::zeros(n, 0)).unwrap()
            })
            .collect();
        let ds = StratifiedDataset::new(strata, vec![]).unwrap();
        let report = adjusted_u_test(&ds, &cfg, rep as u64).unwrap();
        for ps in &report.pairs {
            let oracle = ds_u(&ds.strata()[ps.p - 1], &ds.strata()[ps.q - 1]);
            if ps.u != oracle {
                mismatches += 1;
                worst = worst.max((ps.u - oracle).abs());
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatching pairs (max gap {worst:.2e})"))
}

fn criterion_7() -> Outcome {
    let mut rng = RngStream::new(SEED + 7);
    let mut worst = 0.0f64;
    for h in HFunction::ALL {
        for point in 0..100 {
            let d = 1 + rng.index(3);
            let beta: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let x: Vec<f64> = (0..d).map(|j| if j == 0 { 1.0 } else { rng.uniform_range(-1.5, 1.5) }).collect();
            let treated = point % 2 == 0;
            let w_at = |b: &[f64]| {
                let eta: f64 = b.iter().zip(&x).map(|(u, v)| u * v).sum();
                weight_with_gradient(h, logistic(eta), &x, treated).0
            };
            let eta: f64 = beta.iter().zip(&x).map(|(u, v)| u * v).sum();
            let (_, grad) = weight_with_gradient(h, logistic(eta), &x, treated);
            let step = 1e-6;
            for j in 0..d {
                let (mut up, mut dn) = (beta.clone(), beta.clone());
                up[j] += step;
                dn[j] -= step;
                let fd = (w_at(&up) - w_at(&dn)) / (2.0 * step);
                let rel = (fd - grad[j]).abs() / grad[j].abs().max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    outcome(worst < 1e-6, format!("max relative error {worst:.2e} over 4 h kinds x 100 points"))
}

fn criterion_8() -> Outcome {
    let cfg = ExperimentConfig::desk(SEED + 8);
    let tc = TestConfig {
        h: HFunction::One,
        trim: TrimPolicy::None,
        kernel: cfg.kernel,
        reference_draws: 1000,
        alpha: 0.05,
        max_statistic: false,
        exec: Exec::Sequential,
    };
    let sc = PowerScenario::new(200, 0.0, ErrorDist::Normal).unwrap();
    let base = RngStream::new(SEED + 8);
    let z: Vec<f64> = strata_u::par::map_indexed(Exec::Parallel, 500, |rep| {
        let ds = sc.generate(&base.substream(rep as u64)).ok()?;
        let r = adjusted_u_test(&ds, &tc, rep as u64).ok()?;
        let ps = &r.pair_statistics[0];
        Some((r.n_total as f64).sqrt() * (ps.u_value - 0.5) / r.sigma_hat[0][0].sqrt())
    })
    .into_iter()
    .flatten()
    .collect();
    let d = ks_distance(&z, normal_cdf);
    outcome(d < 0.08, format!("KS={d:.4} over {} replications", z.len()))
}

fn criterion_9() -> Outcome {
    let base = RngStream::new(SEED + 9);
    let h: Vec<f64> = strata_u::par::map_indexed(Exec::Parallel, 2000, |rep| {
        let mut rng = base.substream(rep as u64);
        let strata: Vec<Stratum> = (0..3)
            .map(|s| {
                let n = 60;
                let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                let t: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                let y: Vec<f64> = (0..n)
                    .map(|i| 0.5 * s as f64 + 1.5 * f64::from(t[i]) + z[i] + rng.normal())
                    .collect();
                Stratum::with_intercept(format!("s{s}"), y, t, &Matrix::from_vec(n, 1, z)).unwrap()
            })
            .collect();
        let ds = StratifiedDataset::new(strata, vec!["z".into()]).unwrap();
        lrt_test(&ds).unwrap().statistic
    });
    let d = ks_distance(&h, |x| chi2_cdf(x, 2));
    let hand = lrt_from_estimates(vec![0.0, 2.0], vec![1.0, 1.0]).unwrap().statistic;
    outcome(d < 0.05 && hand == 2.0, format!("KS={d:.4} over 2000 reps; hand example H={hand}"))
}

fn criterion_10(table: &ExperimentTable) -> Outcome {
    let autt = table.cell(0.0, ErrorDist::Normal, Method::AutT).unwrap();
    let worst = autt.trim_mean_fraction.iter().fold(0.0f64, |m, &x| m.max(x));
    let shown: Vec<String> = autt.trim_mean_fraction.iter().map(|f| format!("{:.1}%", 100.0 * f)).collect();
    outcome(worst < 0.15, format!("mean removed fraction per stratum [{}]", shown.join(", ")))
}

fn criterion_11() -> Outcome {
    let sc = PowerScenario::new(100, 0.0, ErrorDist::Normal).unwrap();
    let ds = sc.generate(&RngStream::new(SEED + 11)).unwrap();
    let cfg = TestConfig {
        h: HFunction::One,
        trim: TrimPolicy::None,
        kernel: KernelPolicy::Sampled {
            samples: SampleSize::PerSubject(1000),
        },
        reference_draws: 1000,
        exec: Exec::Sequential,
        ..TestConfig::default()
    };
    let reports: Vec<_> = strata_u::par::map_indexed(Exec::Parallel, 50, |k| adjusted_u_test(&ds, &cfg, k as u64).unwrap());
    let ta: Vec<f64> = reports.iter().map(|r| r.t_a / r.n_total as f64).collect();
    let var_ta = sample_variance(&ta);

    let first = &reports[0];
    let n = first.n_total as f64;
    let scaled: Vec<Vec<f64>> = first.sigma_hat.iter().map(|r| r.iter().map(|x| x / n).collect()).collect();
    let sigma = SpdMatrix::new(Matrix::from_rows(&scaled)).unwrap();
    let base = RngStream::new(SEED + 111);
    let q95: Vec<f64> = (0..50)
        .map(|k| {
            let (mut sample, _) = reference_sample(&sigma, 100_000, &base.substream(k), Exec::Parallel, squared_norm).unwrap();
            sample.sort_by(f64::total_cmp);
            sample[(0.95 * sample.len() as f64).ceil() as usize - 1]
        })
        .collect();
    let var_q = sample_variance(&q95);
    outcome(
        var_ta < 0.003 && var_q < 1e-4,
        format!("Var(T_a/N) across 50 kernel seeds = {var_ta:.3e}; Var(q95) over 50 reference runs = {var_q:.3e}"),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, started: Instant, o: Outcome| {
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {name}: {} ({}) [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    };
    let t = Instant::now();
    let validity = validity_table(500);
    report(1, "type I error", t, criterion_1(&validity));
    report(2, "unadjusted invalidity", t, criterion_2(&validity));
    report(3, "p-value uniformity", t, criterion_3(&validity));
    let t = Instant::now();
    report(4, "power ordering", t, criterion_4());
    let t = Instant::now();
    report(5, "oracle equivalence", t, criterion_5());
    let t = Instant::now();
    report(6, "reduction identity", t, criterion_6());
    let t = Instant::now();
    report(7, "gradient checks", t, criterion_7());
    let t = Instant::now();
    report(8, "studentized normality", t, criterion_8());
    let t = Instant::now();
    report(9, "LRT calibration", t, criterion_9());
    report(10, "trim fractions", t, criterion_10(&validity));
    let t = Instant::now();
    report(11, "Monte Carlo stability", t, criterion_11());
    if failures == 0 {
        println!("acceptance: all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
