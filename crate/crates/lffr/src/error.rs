use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by dataset validation, model fitting, and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row keys of {file} do not match the outcome file ({detail})")]
    MismatchedRows { file: String, detail: String },

    #[error("non-finite value in {name} at row {row}, column {col}")]
    NonFiniteValue {
        name: String,
        row: usize,
        col: String,
    },

    #[error("grid {name} is not strictly increasing at index {index}")]
    NonMonotoneGrid { name: String, index: usize },

    #[error("grid {name} has {len} points; at least {min} are required")]
    TooFewGridPoints {
        name: String,
        len: usize,
        min: usize,
    },

    #[error("scalar design X has no columns; an explicit intercept column is required")]
    MissingIntercept,

    #[error("requested {requested} basis functions but the grid has only {len} points")]
    DegenerateKnots { requested: usize, len: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("too few points ({len}) for {required} basis functions")]
    TooFewPoints { len: usize, required: usize },

    #[error("system at location {location} is numerically singular (condition number {cond:.3e})")]
    SingularSystem { location: usize, cond: f64 },

    #[error("covariance regression has {pairs} within-subject pairs for {unknowns} unknowns")]
    InsufficientPairs { pairs: usize, unknowns: usize },

    #[error("operation requires a single random-intercept column, got q = {q}")]
    UnsupportedQ { q: usize },

    #[error("negative variance {value:.3e} at index {index}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("covariance unusable for simultaneous-band sampling: {0}")]
    SingularCovariance(String),

    #[error("{failed} of {total} bootstrap replicates failed (more than 5%)")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("pointwise fits failed at locations {locations:?}")]
    LocationFailures { locations: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (line {line}): {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code classification used by the command-line front end:
    /// configuration/validation problems are distinguished from i/o failures.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
