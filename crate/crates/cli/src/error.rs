use std::path::Path;

use thiserror::Error;

/// Failures of a run, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<casimir_core::Error> for CliError {
    fn from(e: casimir_core::Error) -> Self {
        use casimir_core::Error as E;
        match e {
            E::NonConvergence { .. } | E::Certification { .. } => {
                CliError::Numerical(e.to_string())
            }
            E::InvalidInput(_) | E::Domain { .. } => CliError::Config(e.to_string()),
            E::Data(_) | E::CalibrationAnomaly { .. } | E::Io { .. } | E::Csv { .. } => {
                CliError::Data(e.to_string())
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
