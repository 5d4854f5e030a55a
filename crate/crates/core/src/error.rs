use thiserror::Error;

pub type Result<T, E = PctError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PctError {
    #[error("malformed record stream: {len} bytes is not a multiple of the {record}-byte record size")]
    MalformedRecord { len: usize, record: usize },

    #[error("non-finite coordinate in point {index}")]
    Decode { index: usize },

    #[error("label count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },

    #[error("invalid cloud: {0}")]
    InvalidCloud(String),

    #[error("insufficient points: need at least {needed}, found {found}")]
    InsufficientPoints { needed: usize, found: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("exact solver capacity exceeded: {size} > {limit}; use emd_sinkhorn for large clouds")]
    Capacity { size: usize, limit: usize },

    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite value produced by {context}")]
    Numeric { context: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("wrong network role: expected {expected}, found {found}")]
    Role { expected: String, found: String },

    #[error("scene contains no primitives")]
    EmptyScene,

    #[error("empty reference cloud")]
    EmptyReference,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PctError {
    pub(crate) fn parameter(name: impl Into<String>, reason: impl Into<String>) -> Self {
        PctError::Parameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        PctError::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
