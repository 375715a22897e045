use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error kinds, grouped so the CLI can map them onto its exit-code table
/// (usage = 1, data = 2, numeric = 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for this error (see the CLI contract).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::ShapeMismatch { .. } => 1,
            Error::Data(_) | Error::Io { .. } | Error::Format(_) => 2,
            Error::NonFinite { .. } => 3,
        }
    }
}
