pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: output extent along {axis} is not an integer ({detail})")]
    NonIntegerExtent {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: gradients already populated; call zero_grad before running backward again")]
    BackwardTwice,

    #[error("backward: loss does not depend on any leaf that requires a gradient")]
    Detached,

    #[error("unknown variable {0} for this tape")]
    UnknownVar(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pyramid is missing level {0}")]
    MissingLevel(usize),

    #[error("level {level}: {detail}")]
    Resolution { level: usize, detail: String },

    #[error("no parameter named {0}")]
    MissingParam(String),

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
