use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric positive-definite: {0}")]
    NotSpd(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("state file version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt state file: {0}")]
    CorruptFile(String),

    #[error("inconsistent state file: {0}")]
    Inconsistent(String),

    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}, column '{column}': non-numeric value '{value}'")]
    NonNumeric {
        line: usize,
        column: String,
        value: String,
    },

    #[error("unknown column '{0}'")]
    UnknownColumn(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("constant covariate column {0}")]
    ConstantColumn(usize),

    #[error("degenerate bandwidth: all sampled points coincide")]
    DegenerateBandwidth,

    #[error("degenerate predictive shape in component {component}")]
    DegenerateShape { component: usize },

    #[error("degenerate baseline quantile (p_gamma = 0)")]
    DegenerateBaselineQuantile,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("failed to converge: {0}")]
    Convergence(String),

    #[error("missing allocation history: {0}")]
    MissingAllocations(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
