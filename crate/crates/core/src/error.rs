use thiserror::Error;

/// Errors raised across ingestion, estimation, inference and prediction.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("h = {h} lies outside the functional domain [{lo}, {hi}]")]
    Domain { h: f64, lo: f64, hi: f64 },

    #[error("row {row}: duplicate (site, time, h) triple")]
    Duplicate { row: usize },

    #[error("row {row}: covariate `{name}` is missing")]
    CovariateMissing { row: usize, name: String },

    #[error("coordinate ({0}, {1}) is not a site of this dataset")]
    Lookup(f64, f64),

    #[error("invalid validation split: {0}")]
    Split(String),

    #[error("coordinate units differ: {0} vs {1}")]
    Unit(String, String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("invalid basis: {0}")]
    Basis(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("system build failed: {0}")]
    Build(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("numerical failure at t = {t}: {msg}")]
    Numerical { t: usize, msg: String },

    #[error("EM failure at iteration {iteration}: {msg} (loglik trace: {trace:?})")]
    EmFailure {
        iteration: usize,
        msg: String,
        trace: Vec<f64>,
    },

    #[error("information matrix is singular (smallest eigenvalue {min_eigenvalue:e})")]
    Conditioning { min_eigenvalue: f64 },

    #[error("score for parameter `{0}` is not finite")]
    NonFiniteScore(String),

    #[error("test for covariate `{0}` failed: covariance block is singular")]
    Test(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::EmFailure { .. }
                | Error::Conditioning { .. }
                | Error::NonFiniteScore(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
