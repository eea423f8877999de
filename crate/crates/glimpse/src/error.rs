use std::path::Path;

/// CLI failure, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invariant failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Check(_) => 1,
            Self::Usage(_) | Self::Io { .. } | Self::Format(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<glimpse_core::Error> for CliError {
    fn from(e: glimpse_core::Error) -> Self {
        match e {
            glimpse_core::Error::Numeric(m) => Self::Numeric(m),
            other => Self::Usage(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
