use strata_u::data::{HFunction, StratifiedDataset, Stratum};
use strata_u::inference::{
    adjusted_u_test, lrt_from_estimates, lrt_test, monte_carlo_pvalue, pair_confidence_interval, reference_pvalue,
    unadjusted_u_test, TestConfig,
};
use strata_u::numkit::linalg::{Matrix, SpdMatrix};
use strata_u::numkit::{chi2_sf, RngStream};
use strata_u::report::to_json;
use strata_u::simgen::{ErrorDist, PowerScenario};
use strata_u::ustat::{KernelPolicy, SampleSize};
use strata_u::{Error, Exec, TrimPolicy};

fn dataset(seed: u64, n: usize) -> StratifiedDataset {
    PowerScenario::new(n, 0.0, ErrorDist::Normal)
        .unwrap()
        .generate(&RngStream::new(seed))
        .unwrap()
}

fn quick() -> TestConfig {
    TestConfig {
        reference_draws: 5000,
        kernel: KernelPolicy::Auto {
            max_exact_tuples: 10_000_000,
            samples: SampleSize::PerSubject(50),
        },
        ..TestConfig::default()
    }
}

#[test]
fn report_is_deterministic_and_exec_independent() {
    let ds = dataset(1, 120);
    let seq = TestConfig { exec: Exec::Sequential, ..quick() };
    let a = to_json(&adjusted_u_test(&ds, &quick(), 42).unwrap()).unwrap();
    let b = to_json(&adjusted_u_test(&ds, &quick(), 42).unwrap()).unwrap();
    let c = to_json(&adjusted_u_test(&ds, &seq, 42).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = to_json(&adjusted_u_test(&ds, &quick(), 43).unwrap()).unwrap();
    assert_ne!(a, d);
}

#[test]
fn sampled_path_is_exec_independent() {
    let ds = dataset(2, 60);
    let sampled = TestConfig {
        kernel: KernelPolicy::Sampled { samples: SampleSize::PerSubject(100) },
        ..quick()
    };
    let seq = TestConfig { exec: Exec::Sequential, ..sampled };
    let a = adjusted_u_test(&ds, &sampled, 7).unwrap();
    let b = adjusted_u_test(&ds, &seq, 7).unwrap();
    assert_eq!(a.u_vector, b.u_vector);
    assert_eq!(a.p_value, b.p_value);
    assert!(a.pairs.iter().all(|p| p.n_eval == 100 * a.n_total as u64));
}

#[test]
fn report_fields_and_shapes() {
    let ds = dataset(3, 80);
    let r = adjusted_u_test(&ds, &TestConfig { max_statistic: true, ..quick() }, 9).unwrap();
    assert_eq!(r.u_vector.len(), 3);
    assert_eq!(r.sigma_hat.len(), 3);
    assert!((0.0..=1.0).contains(&r.p_value) && r.p_value > 0.0);
    let expect_t = r.n_total as f64 * r.u_vector.iter().map(|u| (u - 0.5).powi(2)).sum::<f64>();
    assert_eq!(r.t_a, expect_t);
    let m = r.max_statistic.as_ref().unwrap();
    assert!(m.p_value > 0.0 && m.p_value <= 1.0);
    let json: serde_json::Value = serde_json::from_str(&to_json(&r).unwrap()).unwrap();
    for key in ["u_vector", "sigma_hat", "t_a", "p_value", "pairs", "trim", "config", "seed"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["seed"], 9);
    let pair = &json["pairs"][0];
    for key in ["p", "q", "u", "ci_lo", "ci_hi", "sigma2"] {
        assert!(pair.get(key).is_some(), "missing pairs.{key}");
    }
    assert_eq!((pair["p"].as_u64(), pair["q"].as_u64()), (Some(1), Some(2)));
    let u_back: f64 = json["u_vector"][0].as_f64().unwrap();
    assert_eq!(u_back.to_bits(), r.u_vector[0].to_bits());
}

#[test]
fn trimming_reported_per_stratum() {
    let ds = dataset(4, 100);
    let r = adjusted_u_test(&ds, &quick(), 1).unwrap();
    assert_eq!(r.trim.len(), 3);
    for (t, s) in r.trim.iter().zip(ds.strata()) {
        assert_eq!(t.removed_treated + t.removed_control + t.n_treated + t.n_control, s.len());
    }
    let none = adjusted_u_test(&ds, &TestConfig { trim: TrimPolicy::None, ..quick() }, 1).unwrap();
    assert!(none.trim.iter().all(|t| t.removed_treated + t.removed_control == 0));
    assert_eq!(none.n_total, ds.total_n());
}

#[test]
fn unadjusted_ignores_weights() {
    let ds = dataset(5, 60);
    let a = unadjusted_u_test(&ds, &TestConfig { h: HFunction::Overlap, ..quick() }, 3).unwrap();
    let b = unadjusted_u_test(&ds, &quick(), 3).unwrap();
    assert_eq!(a.u_vector, b.u_vector);
    assert!(!a.adjusted);
}

#[test]
fn invalid_config_rejected() {
    let ds = dataset(6, 40);
    let bad = TestConfig { alpha: 1.5, ..quick() };
    assert!(matches!(adjusted_u_test(&ds, &bad, 1), Err(Error::InvalidArgument(_))));
    let bad = TestConfig { reference_draws: 0, ..quick() };
    assert!(matches!(adjusted_u_test(&ds, &bad, 1), Err(Error::InvalidArgument(_))));
}

#[test]
fn separation_is_reported_with_stratum() {
    let n = 20;
    let z: Vec<f64> = (0..n).map(|i| i as f64 - 9.5).collect();
    let t: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
    let y = vec![0.0; n];
    let bad = Stratum::with_intercept("broken", y, t, &Matrix::from_vec(n, 1, z)).unwrap();
    let good = dataset(7, 40).strata()[0].clone();
    let ds = StratifiedDataset::new(vec![good, bad], vec!["z".into()]).unwrap();
    let err = adjusted_u_test(&ds, &quick(), 1).unwrap_err();
    assert!(err.is_numerical());
    assert!(err.to_string().contains("broken"), "{err}");
}

#[test]
fn monte_carlo_pvalue_formula() {
    assert_eq!(monte_carlo_pvalue(&[1.0, 2.0, 3.0], 2.0), 3.0 / 4.0);
    assert_eq!(monte_carlo_pvalue(&[1.0, 2.0, 3.0], 10.0), 1.0 / 4.0);
}

#[test]
fn reference_matches_chi_square_for_identity() {
    let sigma = SpdMatrix::new(Matrix::identity(3)).unwrap();
    let rng = RngStream::new(11);
    for t in [1.0, 4.0, 7.8147] {
        let p = reference_pvalue(&sigma, t, 200_000, &rng, Exec::Parallel).unwrap();
        assert!((p - chi2_sf(t, 3)).abs() < 0.005, "t={t}: {p}");
    }
    let seq = reference_pvalue(&sigma, 4.0, 20_000, &rng, Exec::Sequential).unwrap();
    let par = reference_pvalue(&sigma, 4.0, 20_000, &rng, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn zero_covariance_reference() {
    let sigma = SpdMatrix::new(Matrix::zeros(2, 2)).unwrap();
    let rng = RngStream::new(1);
    assert_eq!(reference_pvalue(&sigma, 0.0, 99, &rng, Exec::Sequential).unwrap(), 1.0);
    assert_eq!(reference_pvalue(&sigma, 1e-9, 99, &rng, Exec::Sequential).unwrap(), 0.01);
}

#[test]
fn confidence_interval() {
    let (lo, hi) = pair_confidence_interval(0.6, 0.25, 100, 0.05);
    let half = 1.959963984540054 * 0.05;
    assert!((lo - (0.6 - half)).abs() < 1e-9 && (hi - (0.6 + half)).abs() < 1e-9);
    let (lo, hi) = pair_confidence_interval(0.5, 0.0, 10, 0.05);
    assert_eq!((lo, hi), (0.5, 0.5));
}

#[test]
fn lrt_hand_examples() {
    let r = lrt_from_estimates(vec![0.0, 2.0], vec![1.0, 1.0]).unwrap();
    assert_eq!(r.statistic, 2.0);
    assert_eq!(r.tau_bar, 1.0);
    assert_eq!(r.df, 1);
    let r = lrt_from_estimates(vec![1.0, 1.0, 1.0], vec![0.5, 2.0, 1.0]).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_value, 1.0);
    assert!(lrt_from_estimates(vec![1.0], vec![1.0]).is_err());
    assert!(lrt_from_estimates(vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
}

#[test]
fn lrt_recovers_ols_coefficients() {
    // Y = 2 + 3T + Z exactly: τ̂ = 3 in both strata.
    let mk = |id: &str, shift: f64| {
        let n = 12;
        let z: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64).collect();
        let t: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 + shift + 3.0 * f64::from(t[i]) + z[i] + 1e-3 * ((i * 13) % 7) as f64)
            .collect();
        Stratum::with_intercept(id, y, t, &Matrix::from_vec(n, 1, z)).unwrap()
    };
    let ds = StratifiedDataset::new(vec![mk("a", 0.0), mk("b", 1.0)], vec!["z".into()]).unwrap();
    let r = lrt_test(&ds).unwrap();
    for tau in &r.tau {
        assert!((tau - 3.0).abs() < 1e-2);
    }
    assert!((r.tau[0] - r.tau[1]).abs() < 1e-12);
}
