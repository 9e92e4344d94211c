use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: f32, hi: f32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at flat index {index} in {op}")]
    NumericInput { op: &'static str, index: usize },

    #[error("unsupported Winograd tile size {0}")]
    UnsupportedTile(usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("execution failed at node `{node}`: {reason}")]
    Execution { node: String, reason: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape_mismatch(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
