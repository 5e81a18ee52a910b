//! Propensity-adjusted U-statistic tests for treatment-effect heterogeneity.
//!
//! Observational data are grouped into pre-specified, mutually independent
//! strata. Within each stratum a logistic propensity model is fitted and the
//! subjects are reweighted towards a target population chosen through an
//! [`HFunction`]. Every pair of strata `(p, q)` is then compared through a
//! weighted four-sample U-statistic whose kernel asks whether a treated minus
//! control difference in stratum `p` is smaller than one in stratum `q`. The
//! vector of pairwise statistics is asymptotically normal; its covariance is
//! estimated from per-subject influence values and the global statistic
//! `T_a = N * sum (U - 1/2)^2` is referred to a simulated reference law.
//!
//! Module map:
//!
//! - [`data`]: strata, datasets, CSV ingestion, target-population functions.
//! - [`numkit`]: dense linear algebra, seeded random streams, distribution
//!   functions and ordinary least squares.
//! - [`propensity`]: logistic fits, balancing weights and trimming.
//! - [`ustat`]: kernel, exact and sampled pairwise statistics, influence
//!   values and covariance assembly.
//! - [`inference`]: the adjusted and unadjusted U tests, the regression LRT
//!   baseline and confidence intervals.
//! - [`simgen`]: simulation scenarios and the replication runner.

pub mod data;
pub mod error;
pub mod inference;
pub mod numkit;
pub mod par;
pub mod propensity;
pub mod report;
pub mod simgen;
pub mod ustat;

pub use data::{HFunction, Schema, StratifiedDataset, Stratum};
pub use error::{Error, Result};
pub use inference::{
    adjusted_u_test, lrt_test, unadjusted_u_test, HeterogeneityReport, LrtReport, TestConfig,
};
pub use numkit::rng::RngStream;
pub use par::Exec;
pub use propensity::TrimPolicy;
pub use ustat::KernelPolicy;
