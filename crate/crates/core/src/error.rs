use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {msg}")]
    Ingest { row: usize, msg: String },

    #[error("stratum '{stratum}': {msg}")]
    Validation { stratum: String, msg: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (largest jitter tried {jitter:e})")]
    SingularMatrix { jitter: f64 },

    #[error("singular design matrix")]
    SingularDesign,

    #[error("logistic fit did not converge after {iterations} iterations (score norm {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        beta: Vec<f64>,
        grad_norm: f64,
    },

    #[error("quasi-complete separation: fitted propensities reach 0 or 1 (max |beta| = {max_abs_beta:.3e})")]
    Separation { max_abs_beta: f64 },

    #[error("stratum '{stratum}': trimming leaves {n_treated} treated and {n_control} control subjects (need >= 2 each)")]
    TrimInfeasible {
        stratum: String,
        n_treated: usize,
        n_control: usize,
    },

    #[error("a group's weights sum to zero")]
    DegenerateWeights,

    #[error("{draws} sampled tuples left some subject uncovered after {retries} redraws")]
    CoverageFailure { draws: u64, retries: usize },

    #[error("propensity Jacobian is numerically singular")]
    SingularJacobian,

    #[error("scenario kept producing a stratum with fewer than 2 subjects in a group ({attempts} attempts)")]
    DegenerateScenario { attempts: usize },

    #[error("stratum '{stratum}': {source}")]
    InStratum {
        stratum: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a stratum label to an error raised while processing it.
    pub fn in_stratum(self, stratum: &str) -> Error {
        match self {
            e @ (Error::InStratum { .. } | Error::Validation { .. } | Error::TrimInfeasible { .. }) => e,
            e => Error::InStratum {
                stratum: stratum.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Numerical failures (as opposed to bad input or usage).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularMatrix { .. }
            | Error::SingularDesign
            | Error::NonConvergence { .. }
            | Error::Separation { .. }
            | Error::DegenerateWeights
            | Error::CoverageFailure { .. }
            | Error::SingularJacobian
            | Error::TrimInfeasible { .. }
            | Error::DegenerateScenario { .. } => true,
            Error::InStratum { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
