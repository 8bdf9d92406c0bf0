use thiserror::Error;

/// Failure classes, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or inconsistent configuration or arguments (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Missing, unreadable or corrupt artifact (exit 3).
    #[error("artifact error: {0}")]
    Artifact(String),
    /// Non-finite values during optimization (exit 4).
    #[error("numerical abort: {0}")]
    Numerical(String),
    /// `evaluate` ran but at least one threshold failed (exit 1).
    #[error("thresholds failed: {0}")]
    Thresholds(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Thresholds(_) => 1,
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn artifact(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Artifact(format!("{}: {e}", path.display()))
    }
}

impl From<polarsynth::Error> for CliError {
    fn from(e: polarsynth::Error) -> Self {
        use polarsynth::Error as E;
        match e {
            E::Domain(_) | E::Config(_) | E::Shape(_) => CliError::Config(e.to_string()),
            E::Numerical(_) => CliError::Numerical(e.to_string()),
            E::Format(_) | E::Io(_) => CliError::Artifact(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}
