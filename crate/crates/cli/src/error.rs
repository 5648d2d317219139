use std::path::PathBuf;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("missing artifact {}: run `qolab generate` with this configuration first", .0.display())]
    MissingArtifact(PathBuf),

    #[error("artifacts in {} were generated from a different configuration (world digest {found}, config expects {expected}); rerun `qolab generate`", dir.display())]
    StaleArtifacts { dir: PathBuf, found: String, expected: String },

    #[error(transparent)]
    Lab(#[from] qolab::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {reason}", path.display())]
    Csv { path: PathBuf, reason: String },
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config { field: field.into(), reason: reason.into() }
    }

    /// 1 for usage and configuration problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Lab(qolab::Error::Config { .. }) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
