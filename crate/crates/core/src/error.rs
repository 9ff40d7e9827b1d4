use std::path::PathBuf;

pub type Result<T, E = LoidError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LoidError {
    /// Invalid hyperparameter or precondition on user-supplied settings.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Dataset content that cannot be used (empty, out of range, too small).
    #[error("data error: {0}")]
    Data(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Corrupt or incompatible artifact file.
    #[error("artifact format error: {0}")]
    Format(String),

    #[error("unknown {kind} id `{id}`")]
    UnknownEntity { kind: &'static str, id: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LoidError {
    /// True for errors caused by bad settings rather than bad inputs or artifacts.
    pub fn is_config(&self) -> bool {
        matches!(self, LoidError::Config(_))
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> LoidError {
    LoidError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> LoidError {
    LoidError::Shape(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> LoidError {
    LoidError::Data(msg.into())
}
