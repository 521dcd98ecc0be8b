use thiserror::Error;

/// Errors raised by the model, inference, estimation and evaluation routines.
#[derive(Debug, Error)]
pub enum MsmError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("state index {index} out of range for K = {k}")]
    StateOutOfRange { index: usize, k: usize },

    #[error("label {label} out of range 1..={k}")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid model field `{path}`: {reason}")]
    InvalidField { path: String, reason: String },

    #[error("transition matrix is reducible: states {unreachable:?} unreachable from state {from}")]
    ReducibleChain { from: usize, unreachable: Vec<usize> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("unique indexing violated: states {a} and {b} have identical {part}")]
    UniqueIndexing { a: usize, b: usize, part: &'static str },

    #[error("brute-force enumeration refused: {paths} paths exceeds limit {limit}")]
    TooManyPaths { paths: f64, limit: usize },

    #[error("polynomial Gram matrix of state {state} is singular beyond ridge rescue")]
    SingularGram { state: usize },

    #[error("gradient step failed: {0}")]
    GradientFailure(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported schema version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("estimation failed in restart {restart}")]
    Estimation {
        restart: usize,
        #[source]
        source: Box<MsmError>,
    },

    #[error("ground-truth generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MsmError {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, found: usize) -> Self {
        MsmError::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn field(path: impl Into<String>, reason: impl Into<String>) -> Self {
        MsmError::InvalidField {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MsmError::Singular(_)
                | MsmError::SingularGram { .. }
                | MsmError::GradientFailure(_)
                | MsmError::RankDeficient(_)
                | MsmError::NonFinite(_)
                | MsmError::GenerationFailed { .. }
                | MsmError::UniqueIndexing { .. }
                | MsmError::Estimation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, MsmError>;
