use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum KftError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("axis {axis} out of range for tensor of order {order}")]
    AxisOutOfRange { axis: usize, order: usize },

    #[error("rank mismatch between consecutive cores: {0}")]
    RankMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: objective is not finite")]
    Diverged { epoch: usize, iteration: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at {path}:{line}: {msg}")]
    DataAt {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KftError>;
