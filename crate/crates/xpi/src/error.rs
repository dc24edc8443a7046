use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum XpiError {
    #[error("{}: file not found", .0.display())]
    NotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("handshake mismatch: {0}")]
    Handshake(String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("frame payload of {0} bytes exceeds the 1 GiB limit")]
    Oversize(u64),
    #[error("unknown frame type {0}")]
    UnknownFrameType(u32),
    #[error("expected {expected} frame, got {got}")]
    UnexpectedFrame { expected: &'static str, got: &'static str },
    #[error("peer aborted: {0}")]
    PeerAbort(String),
    #[error("connection closed by peer")]
    Disconnected,
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error(transparent)]
    Core(#[from] xpi_core::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = XpiError> = std::result::Result<T, E>;

impl XpiError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            XpiError::NotFound(path)
        } else {
            XpiError::Io { path, source }
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        XpiError::Format { what, detail: detail.into() }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> u8 {
        use xpi_core::Error as C;
        match self {
            XpiError::Invalid(_) => 2,
            XpiError::NotFound(_) | XpiError::Io { .. } => 3,
            XpiError::Format { .. } => 4,
            XpiError::Handshake(_) => 5,
            XpiError::Core(C::CorrelationExhausted { .. } | C::CorrelationConsumed { .. } | C::MissingTruncPair(_)) => 6,
            XpiError::MalformedFrame(_)
            | XpiError::Oversize(_)
            | XpiError::UnknownFrameType(_)
            | XpiError::UnexpectedFrame { .. }
            | XpiError::PeerAbort(_)
            | XpiError::Disconnected
            | XpiError::Transport(_)
            | XpiError::Core(C::Transport(_) | C::Desync(_)) => 7,
            XpiError::Core(_) => 8,
        }
    }
}
