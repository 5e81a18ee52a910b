//! Weighted four-sample statistics for one pair of strata.
//!
//! The four groups of a pair are always ordered `[p treated, p control,
//! q treated, q control]` (see [`PT`], [`PC`], [`QT`], [`QC`]).
//!
//! Exact mode avoids the quadruple loop: the kernel only depends on the
//! within-stratum differences, so the weighted differences of stratum `q` are
//! sorted once and each difference of stratum `p` is located by binary search
//! (and vice versa for the projections of `q` subjects). The cost is
//! `O(P log Q + Q log P)` for `P = n_pt n_pc` and `Q = n_qt n_qc` pair
//! differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;

use super::kernel::compare_differences;

pub const PT: usize = 0;
pub const PC: usize = 1;
pub const QT: usize = 2;
pub const QC: usize = 3;

const MAX_REDRAWS: usize = 100;

/// Outcomes and positive weights of one treatment group of one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGroup {
    pub outcomes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedGroup {
    pub fn new(outcomes: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(outcomes.len(), weights.len(), "one weight per outcome");
        WeightedGroup { outcomes, weights }
    }

    pub fn unit(outcomes: Vec<f64>) -> Self {
        let weights = vec![1.0; outcomes.len()];
        WeightedGroup { outcomes, weights }
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Exact,
    Sampled,
}

/// Number of sampled tuples per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    /// `m = k · N` with `N` the total sample size over all strata.
    PerSubject(u64),
    Fixed(u64),
}

impl SampleSize {
    pub fn resolve(self, n_total: usize) -> u64 {
        match self {
            SampleSize::PerSubject(k) => k.saturating_mul(n_total as u64),
            SampleSize::Fixed(m) => m,
        }
    }
}

/// How each pairwise statistic is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelPolicy {
    /// Exact when the complete tuple count `n_pt n_pc n_qt n_qc` is at most
    /// `max_exact_tuples`, sampled otherwise.
    Auto {
        max_exact_tuples: u64,
        samples: SampleSize,
    },
    Exact,
    Sampled { samples: SampleSize },
}

impl Default for KernelPolicy {
    fn default() -> Self {
        KernelPolicy::Auto {
            max_exact_tuples: 10_000_000,
            samples: SampleSize::PerSubject(1000),
        }
    }
}

impl KernelPolicy {
    /// Auto policy with `m = k · N`.
    pub fn auto_per_subject(k: u64) -> Self {
        KernelPolicy::Auto {
            max_exact_tuples: 10_000_000,
            samples: SampleSize::PerSubject(k),
        }
    }
}

/// Kernel-level summary of one pair.
#[derive(Debug, Clone)]
pub struct KernelSummary {
    /// Self-normalised weighted kernel mean `U_a`. In sampled mode the
    /// normalisation runs over the sampled tuples.
    pub u_value: f64,
    /// Plain mean of the weighted kernel `Φ̃ = w w w w φ` over all (or all
    /// sampled) tuples.
    pub theta_star: f64,
    /// For each subject, the mean over tuples containing it of the product of
    /// the other three weights times the kernel.
    pub partial: [Vec<f64>; 4],
    pub n_eval: u64,
    pub mode: KernelMode,
    /// Appearance count of every subject (sampled mode).
    pub appearances: Option<[Vec<u32>; 4]>,
    pub redraws: usize,
}

impl KernelSummary {
    /// Method-of-moment projections `h̃` of the weighted kernel onto each
    /// subject: its own weight times [`partial`](Self::partial).
    pub fn htilde(&self, groups: [&WeightedGroup; 4]) -> [Vec<f64>; 4] {
        std::array::from_fn(|g| {
            self.partial[g]
                .iter()
                .zip(&groups[g].weights)
                .map(|(a, w)| a * w)
                .collect()
        })
    }
}

fn check_groups(groups: [&WeightedGroup; 4]) -> Result<()> {
    for g in groups {
        if g.is_empty() {
            return Err(Error::InvalidArgument("every group of a pair needs a subject".into()));
        }
        if g.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(g.weight_sum() > 0.0) {
            return Err(Error::DegenerateWeights);
        }
    }
    Ok(())
}

pub fn tuple_count(groups: [&WeightedGroup; 4]) -> u128 {
    groups.iter().map(|g| g.len() as u128).product()
}

/// Sorted distinct differences with run masses and cumulative masses.
struct DiffTable {
    values: Vec<f64>,
    run: Vec<f64>,
    /// `below[r]` = mass of runs before `r`; length `runs + 1`.
    below: Vec<f64>,
    /// `above[r]` = mass of runs from `r` on; length `runs + 1`.
    above: Vec<f64>,
}

impl DiffTable {
    fn new(mut diffs: Vec<(f64, f64)>) -> Self {
        diffs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values = Vec::new();
        let mut run: Vec<f64> = Vec::new();
        for (d, w) in diffs {
            if values.last() == Some(&d) {
                *run.last_mut().unwrap() += w;
            } else {
                values.push(d);
                run.push(w);
            }
        }
        let r = values.len();
        let mut below = vec![0.0; r + 1];
        for i in 0..r {
            below[i + 1] = below[i] + run[i];
        }
        let mut above = vec![0.0; r + 1];
        for i in (0..r).rev() {
            above[i] = above[i + 1] + run[i];
        }
        DiffTable {
            values,
            run,
            below,
            above,
        }
    }

    fn locate(&self, d: f64) -> (usize, bool) {
        let idx = self.values.partition_point(|&v| v < d);
        (idx, idx < self.values.len() && self.values[idx] == d)
    }

    /// Mass of stored differences `> d`, plus half the mass equal to `d`.
    fn mass_above(&self, d: f64) -> f64 {
        match self.locate(d) {
            (i, true) => self.above[i + 1] + 0.5 * self.run[i],
            (i, false) => self.above[i],
        }
    }

    /// Mass of stored differences `< d`, plus half the mass equal to `d`.
    fn mass_below(&self, d: f64) -> f64 {
        match self.locate(d) {
            (i, true) => self.below[i] + 0.5 * self.run[i],
            (i, false) => self.below[i],
        }
    }
}

fn differences(t: &WeightedGroup, c: &WeightedGroup) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(t.len() * c.len());
    for (yt, wt) in t.outcomes.iter().zip(&t.weights) {
        for (yc, wc) in c.outcomes.iter().zip(&c.weights) {
            out.push((yt - yc, wt * wc));
        }
    }
    out
}

/// Complete weighted statistic over every tuple.
pub fn pairwise_exact(groups: [&WeightedGroup; 4]) -> Result<KernelSummary> {
    check_groups(groups)?;
    let [pt, pc, qt, qc] = groups;
    let q_table = DiffTable::new(differences(qt, qc));
    let p_table = DiffTable::new(differences(pt, pc));

    let mut partial: [Vec<f64>; 4] = std::array::from_fn(|g| vec![0.0; groups[g].len()]);
    let mut total = 0.0;
    for (i, (yi, wi)) in pt.outcomes.iter().zip(&pt.weights).enumerate() {
        let mut row = 0.0;
        for (j, (yj, wj)) in pc.outcomes.iter().zip(&pc.weights).enumerate() {
            let g = q_table.mass_above(yi - yj);
            row += wj * g;
            partial[PC][j] += wi * g;
        }
        partial[PT][i] = row;
        total += wi * row;
    }
    for (k, (yk, wk)) in qt.outcomes.iter().zip(&qt.weights).enumerate() {
        let mut row = 0.0;
        for (l, (yl, wl)) in qc.outcomes.iter().zip(&qc.weights).enumerate() {
            let f = p_table.mass_below(yk - yl);
            row += wl * f;
            partial[QC][l] += wk * f;
        }
        partial[QT][k] = row;
    }

    let n: [f64; 4] = std::array::from_fn(|g| groups[g].len() as f64);
    let all: f64 = n.iter().product();
    for (g, part) in partial.iter_mut().enumerate() {
        let others = all / n[g];
        part.iter_mut().for_each(|a| *a /= others);
    }
    let wsum: f64 = groups.iter().map(|g| g.weight_sum()).product();
    Ok(KernelSummary {
        u_value: (total / wsum).clamp(0.0, 1.0),
        theta_star: total / all,
        partial,
        n_eval: all as u64,
        mode: KernelMode::Exact,
        appearances: None,
        redraws: 0,
    })
}

/// `U_a` over all tuples.
pub fn pairwise_adjusted_u_exact(groups: [&WeightedGroup; 4]) -> Result<f64> {
    pairwise_exact(groups).map(|s| s.u_value)
}

/// Statistic over `m` tuples drawn uniformly with replacement (one subject
/// per group per draw). The whole sample is redrawn until every subject
/// appears at least once.
pub fn pairwise_sampled(groups: [&WeightedGroup; 4], rng: &mut RngStream, m: u64) -> Result<KernelSummary> {
    check_groups(groups)?;
    if m == 0 {
        return Err(Error::InvalidArgument("sampled mode needs m >= 1".into()));
    }
    let sizes: [usize; 4] = std::array::from_fn(|g| groups[g].len());
    if (m as u128) < *sizes.iter().max().unwrap() as u128 {
        return Err(Error::CoverageFailure { draws: m, retries: 0 });
    }
    let mut counts: [Vec<u32>; 4] = std::array::from_fn(|g| vec![0; sizes[g]]);
    let mut acc: [Vec<f64>; 4] = std::array::from_fn(|g| vec![0.0; sizes[g]]);
    for redraws in 0..=MAX_REDRAWS {
        for g in 0..4 {
            counts[g].iter_mut().for_each(|c| *c = 0);
            acc[g].iter_mut().for_each(|a| *a = 0.0);
        }
        let mut sum_w = 0.0;
        let mut sum_wphi = 0.0;
        for _ in 0..m {
            let idx: [usize; 4] = std::array::from_fn(|g| rng.index(sizes[g]));
            let w: [f64; 4] = std::array::from_fn(|g| groups[g].weights[idx[g]]);
            let y: [f64; 4] = std::array::from_fn(|g| groups[g].outcomes[idx[g]]);
            let phi = compare_differences(y[PT] - y[PC], y[QT] - y[QC]);
            let w01 = w[0] * w[1];
            let w23 = w[2] * w[3];
            let wp = w01 * w23;
            sum_w += wp;
            for g in 0..4 {
                counts[g][idx[g]] += 1;
            }
            if phi != 0.0 {
                sum_wphi += wp * phi;
                acc[PT][idx[PT]] += w[1] * w23 * phi;
                acc[PC][idx[PC]] += w[0] * w23 * phi;
                acc[QT][idx[QT]] += w01 * w[3] * phi;
                acc[QC][idx[QC]] += w01 * w[2] * phi;
            }
        }
        if counts.iter().all(|c| c.iter().all(|&k| k > 0)) {
            let partial = std::array::from_fn(|g| {
                acc[g]
                    .iter()
                    .zip(&counts[g])
                    .map(|(a, &k)| a / k as f64)
                    .collect()
            });
            if !(sum_w > 0.0) {
                return Err(Error::DegenerateWeights);
            }
            return Ok(KernelSummary {
                u_value: (sum_wphi / sum_w).clamp(0.0, 1.0),
                theta_star: sum_wphi / m as f64,
                partial,
                n_eval: m,
                mode: KernelMode::Sampled,
                appearances: Some(counts),
                redraws,
            });
        }
    }
    Err(Error::CoverageFailure {
        draws: m,
        retries: MAX_REDRAWS,
    })
}

/// Evaluate a pair under `policy`; `n_total` is the sample size over all
/// strata (for per-subject sample sizes).
pub fn pairwise_kernel(
    groups: [&WeightedGroup; 4],
    policy: KernelPolicy,
    n_total: usize,
    rng: &mut RngStream,
) -> Result<KernelSummary> {
    match policy {
        KernelPolicy::Exact => pairwise_exact(groups),
        KernelPolicy::Sampled { samples } => pairwise_sampled(groups, rng, samples.resolve(n_total)),
        KernelPolicy::Auto {
            max_exact_tuples,
            samples,
        } => {
            if tuple_count(groups) <= max_exact_tuples as u128 {
                pairwise_exact(groups)
            } else {
                pairwise_sampled(groups, rng, samples.resolve(n_total))
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use proptest::prelude::*;

    fn groups_from(y: [&[f64]; 4], w: [&[f64]; 4]) -> [WeightedGroup; 4] {
        std::array::from_fn(|g| WeightedGroup::new(y[g].to_vec(), w[g].to_vec()))
    }

    fn refs(g: &[WeightedGroup; 4]) -> [&WeightedGroup; 4] {
        std::array::from_fn(|i| &g[i])
    }

    fn random_groups(rng: &mut RngStream, max: usize, discrete: bool, unit: bool) -> [WeightedGroup; 4] {
        std::array::from_fn(|_| {
            let n = 1 + rng.index(max);
            let y = (0..n)
                .map(|_| if discrete { rng.index(4) as f64 } else { rng.normal() })
                .collect();
            let w = (0..n).map(|_| if unit { 1.0 } else { 0.2 + 3.0 * rng.uniform() }).collect();
            WeightedGroup::new(y, w)
        })
    }

    #[test]
    fn single_tuple() {
        let g = groups_from([&[1.0], &[0.0], &[3.0], &[1.0]], [&[0.3], &[2.0], &[5.0], &[0.1]]);
        let s = pairwise_exact(refs(&g)).unwrap();
        assert!((s.u_value - 1.0).abs() < 1e-15);
        let h = s.htilde(refs(&g));
        let wphi = 0.3 * 2.0 * 5.0 * 0.1;
        for hg in &h {
            assert!((hg[0] - wphi).abs() < 1e-15);
        }
        let mut rng = RngStream::new(1);
        let sampled = pairwise_sampled(refs(&g), &mut rng, 50).unwrap();
        assert!((sampled.u_value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_match_brute_force_exactly() {
        let mut rng = RngStream::new(5);
        for _ in 0..200 {
            let discrete = rng.uniform() < 0.5;
            let g = random_groups(&mut rng, 6, discrete, true);
            assert_eq!(pairwise_adjusted_u_exact(refs(&g)).unwrap(), brute_u(refs(&g)));
        }
    }

    #[test]
    fn weighted_matches_brute_force() {
        let mut rng = RngStream::new(6);
        for _ in 0..200 {
            let discrete = rng.uniform() < 0.5;
            let g = random_groups(&mut rng, 6, discrete, false);
            let exact = pairwise_adjusted_u_exact(refs(&g)).unwrap();
            let brute = brute_u(refs(&g));
            assert!((exact - brute).abs() <= 1e-12 * brute.abs().max(1e-300), "{exact} vs {brute}");
        }
    }

    #[test]
    fn htilde_matches_triple_loop() {
        let mut rng = RngStream::new(7);
        for _ in 0..50 {
            let unit = rng.uniform() < 0.5;
            let discrete = rng.uniform() < 0.5;
            let g = random_groups(&mut rng, 5, discrete, unit);
            let h = pairwise_exact(refs(&g)).unwrap().htilde(refs(&g));
            let oracle = brute_htilde(refs(&g));
            for grp in 0..4 {
                for (a, b) in h[grp].iter().zip(&oracle[grp]) {
                    if unit {
                        assert_eq!(a, b);
                    } else {
                        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn shifted_copy() {
        let yt = [1.2, 0.4, 2.2, 1.9];
        let yc = [0.1, 0.3, -0.5];
        let shift = |v: &[f64]| v.iter().map(|x| x + 10.0).collect::<Vec<_>>();
        let (qt, qc) = (shift(&yt), shift(&yc));
        let ones = [1.0; 4];
        let g = groups_from([&yt, &yc, &qt, &qc], [&ones, &ones[..3], &ones, &ones[..3]]);
        assert_eq!(pairwise_adjusted_u_exact(refs(&g)).unwrap(), brute_u(refs(&g)));
    }

    #[test]
    fn identical_multisets_swap_to_one() {
        let mut rng = RngStream::new(8);
        for _ in 0..20 {
            let g = random_groups(&mut rng, 6, true, true);
            let swapped = [g[2].clone(), g[3].clone(), g[0].clone(), g[1].clone()];
            let a = pairwise_adjusted_u_exact(refs(&g)).unwrap();
            let b = pairwise_adjusted_u_exact(refs(&swapped)).unwrap();
            assert_eq!(a + b, 1.0);
        }
        let y = [1.0, 2.0, 2.0, 5.0];
        let ones = [1.0; 4];
        let g = groups_from([&y, &y, &y, &y], [&ones; 4]);
        assert_eq!(pairwise_adjusted_u_exact(refs(&g)).unwrap(), 0.5);
    }

    #[test]
    fn all_ties() {
        let y = [3.0; 5];
        let w = [0.5, 1.0, 2.0, 1.5, 1.0];
        let g = groups_from([&y, &y[..3], &y[..4], &y[..2]], [&w, &w[..3], &w[..4], &w[..2]]);
        let s = pairwise_exact(refs(&g)).unwrap();
        assert_eq!(s.u_value, 0.5);
        let h = s.htilde(refs(&g));
        let means: [f64; 4] = std::array::from_fn(|k| g[k].weights.iter().sum::<f64>() / g[k].len() as f64);
        for grp in 0..4 {
            let others: f64 = (0..4).filter(|&k| k != grp).map(|k| means[k]).product();
            for (i, hv) in h[grp].iter().enumerate() {
                let expect = 0.5 * g[grp].weights[i] * others;
                assert!((hv - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn degenerate_weights() {
        let g = groups_from([&[1.0], &[0.0], &[3.0], &[1.0]], [&[0.0], &[2.0], &[5.0], &[0.1]]);
        assert!(matches!(pairwise_exact(refs(&g)), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn sampled_close_to_exact_and_deterministic() {
        let mut rng = RngStream::new(9);
        let g = random_groups(&mut rng, 3, false, true);
        let g: [WeightedGroup; 4] = std::array::from_fn(|k| {
            let mut x = g[k].clone();
            while x.len() < 3 {
                x.outcomes.push(rng.normal());
                x.weights.push(1.0);
            }
            x
        });
        let exact = pairwise_adjusted_u_exact(refs(&g)).unwrap();
        let a = pairwise_sampled(refs(&g), &mut RngStream::new(10), 1_000_000).unwrap();
        let b = pairwise_sampled(refs(&g), &mut RngStream::new(10), 1_000_000).unwrap();
        assert!((a.u_value - exact).abs() < 0.005);
        assert_eq!(a.u_value, b.u_value);
        assert!(a.appearances.unwrap().iter().all(|c| c.iter().all(|&k| k > 0)));
    }

    #[test]
    fn sampled_average_is_unbiased_for_exact() {
        let mut rng = RngStream::new(13);
        let g = random_groups(&mut rng, 4, true, false);
        let exact = pairwise_exact(refs(&g)).unwrap();
        let base = RngStream::new(14);
        let reps = 400;
        let mean: f64 = (0..reps)
            .map(|r| pairwise_sampled(refs(&g), &mut base.substream(r), 2000).unwrap().theta_star)
            .sum::<f64>()
            / reps as f64;
        // θ* estimates the plain weighted-kernel mean without bias.
        assert!((mean - exact.theta_star).abs() < 0.01 * exact.theta_star.max(0.01));
    }

    #[test]
    fn coverage_failure_when_m_too_small() {
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let g: [WeightedGroup; 4] = std::array::from_fn(|_| WeightedGroup::unit(y.clone()));
        assert!(matches!(
            pairwise_sampled(refs(&g), &mut RngStream::new(1), 20),
            Err(Error::CoverageFailure { .. })
        ));
        // 60 draws for 50 subjects essentially never covers everyone.
        assert!(matches!(
            pairwise_sampled(refs(&g), &mut RngStream::new(1), 60),
            Err(Error::CoverageFailure { retries: 100, .. })
        ));
    }

    #[test]
    fn auto_policy_switches_on_tuple_count() {
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let g: [WeightedGroup; 4] = std::array::from_fn(|_| WeightedGroup::unit(y.clone()));
        let mut rng = RngStream::new(2);
        let small = KernelPolicy::Auto { max_exact_tuples: 10_000, samples: SampleSize::Fixed(5000) };
        assert_eq!(pairwise_kernel(refs(&g), small, 40, &mut rng).unwrap().mode, KernelMode::Exact);
        let tight = KernelPolicy::Auto { max_exact_tuples: 9_999, samples: SampleSize::Fixed(5000) };
        let s = pairwise_kernel(refs(&g), tight, 40, &mut rng).unwrap();
        assert_eq!((s.mode, s.n_eval), (KernelMode::Sampled, 5000));
    }

    #[test]
    fn large_treated_shift_of_q_gives_one() {
        let mut rng = RngStream::new(15);
        for _ in 0..30 {
            let g = random_groups(&mut rng, 6, false, false);
            let base = pairwise_adjusted_u_exact(refs(&g)).unwrap();
            let mut shifted = g.clone();
            shifted[QT].outcomes.iter_mut().for_each(|y| *y += 100.0);
            let up = pairwise_adjusted_u_exact(refs(&shifted)).unwrap();
            assert!((up - 1.0).abs() < 1e-12);
            assert!(base <= up + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn invariant_to_group_scaling(seed in any::<u64>(), grp in 0usize..4, k in 0.01f64..100.0) {
            let mut rng = RngStream::new(seed);
            let g = random_groups(&mut rng, 6, seed % 2 == 0, false);
            let a = pairwise_adjusted_u_exact(refs(&g)).unwrap();
            let mut scaled = g.clone();
            scaled[grp].weights.iter_mut().for_each(|w| *w *= k);
            let b = pairwise_adjusted_u_exact(refs(&scaled)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
