use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] arl2_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable identifier written to `error.json`.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(arl2_core::Error::NonFinite { .. }) => "non_finite",
            CliError::Core(arl2_core::Error::Divergence { .. }) => "divergence",
            CliError::Core(_) => "contract",
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Blob(_) => "blob",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "csv",
        }
    }

    /// Process exit code: 2 for bad configuration or input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) | CliError::Json(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
