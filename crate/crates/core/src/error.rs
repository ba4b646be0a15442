use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("backward root must be a 1x1 value, got {0}x{1}")]
    NotScalar(usize, usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("enumeration over {0} items exceeds the limit of {1}")]
    EnumerationTooLarge(usize, usize),

    #[error("numerical degeneracy: conditional marginal {value} at item {item}")]
    NumericalDegeneracy { item: usize, value: f64 },

    #[error("rejection sampler exhausted {attempts} proposals (acceptance rate estimate {acceptance_rate:.3e})")]
    ResamplingExhausted { attempts: usize, acceptance_rate: f64 },

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("only {found} unique draws out of {needed} requested after {draws} draws")]
    InsufficientUnique { needed: usize, found: usize, draws: usize },

    #[error("dataset too small: {have} baskets, need more than {need}")]
    TooFewBaskets { have: usize, need: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("item id {id} out of range for catalog of size {m}")]
    ItemOutOfRange { id: usize, m: usize },

    #[error("invalid model file: {0}")]
    ModelFormat(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
