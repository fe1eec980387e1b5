use thiserror::Error;

/// Errors raised by the decoding engine and its analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("context overflow: position {position} exceeds context length {context_len}")]
    ContextOverflow { position: usize, context_len: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Weight-manifest and trace-file format errors. Each variant names the
/// offending tensor or line so corrupt artifacts are easy to locate.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed manifest line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected} floats, found {found}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("truncated blob: tensor `{name}` needs bytes up to {needed}, blob has {available}")]
    TruncatedBlob {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("trace line {line}: {reason}")]
    Trace { line: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
