use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown message kind '{0}'")]
    UnknownKind(String),

    #[error("schema version {got} is not supported (expected {expected})")]
    SchemaMismatch { got: u32, expected: u32 },

    #[error("frame of {size} bytes exceeds the {limit} byte limit")]
    FrameLimit { size: usize, limit: usize },

    #[error("model not ready: {0}")]
    NotReady(String),

    #[error("dispatch error: {0}")]
    Dispatch(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn run(msg: impl Into<String>) -> Self {
        Error::Run(msg.into())
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }

    /// True for wire-level failures: malformed frames, unknown kinds,
    /// version mismatches and session-order violations.
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            Error::Protocol(_) | Error::UnknownKind(_) | Error::SchemaMismatch { .. } | Error::FrameLimit { .. }
        )
    }
}
