use std::path::PathBuf;

/// A malformed binary file; `offset` is the byte where decoding failed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("format error at byte {offset}: {message}")]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

impl FormatError {
    pub fn new(offset: usize, message: impl Into<String>) -> Self {
        Self { offset, message: message.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Path { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error(transparent)]
    Core(#[from] unisiam_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for configuration and missing-input errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Path { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            CliError::Core(unisiam_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

impl From<unisiam_core::trainer::Aborted> for CliError {
    fn from(a: unisiam_core::trainer::Aborted) -> Self {
        CliError::Core(a.error)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
