use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("plan not expressible in the action space: {0}")]
    Encoding(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("malformed content in {}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("environment fingerprint mismatch: checkpoint has {found}, environment has {expected}")]
    Fingerprint { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
