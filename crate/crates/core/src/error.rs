use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resolution {h}x{w} is smaller than the {grid}x{grid} token grid")]
    ResolutionTooSmall { h: usize, w: usize, grid: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    TrainingFailure {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ResolutionTooSmall { .. } => "resolution-too-small",
            Error::InvalidState(_) => "invalid-state",
            Error::TrainingFailure { .. } => "training-failure",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Io(_) => "io",
        }
    }
}
