use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("row is not a probability vector: {0}")]
    NonStochasticRow(String),
    #[error("reward outside [0, 1]: {0}")]
    RewardOutOfRange(String),
    #[error("identification constraint infeasible: {0}")]
    InfeasibleConstraint(String),
    #[error("response does not match game/policy: {0}")]
    ResponseMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("KL support mismatch: q = 0 where p > 0")]
    SupportMismatch,
    #[error("operation requires a myopic follower (gamma = 0), got gamma = {0}")]
    NotMyopic(f64),
    #[error("prescription grid is empty")]
    EmptyGrid,
    #[error("theta sample is empty")]
    EmptyThetaSample,
    #[error("no data")]
    EmptyData,
    #[error("optimizer did not converge after {iterations} iterations (grad norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("observed transition has zero probability under the candidate model")]
    ZeroTransitionProbability,
    #[error("confidence set is empty: {0}")]
    EmptyConfidenceSet(String),
    #[error("model confidence set is empty")]
    EmptyModelSet,
    #[error("enumeration too large: {0}")]
    TooLarge(String),
    #[error("aggregate file missing: {0}")]
    MissingAggregate(String),
    #[error("every run failed: {0}")]
    RunFailed(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. }
            | Error::ZeroTransitionProbability
            | Error::EmptyConfidenceSet(_)
            | Error::EmptyModelSet
            | Error::RunFailed(_)
            | Error::SupportMismatch => 3,
            Error::Verification(_) => 4,
            _ => 2,
        }
    }
}
