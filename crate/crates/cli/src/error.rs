use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] evkf_core::Error),
    #[error("ledgers come from different configs ({0}); pass --force to compare them anyway")]
    MixedHashes(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    /// Process exit code: 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use evkf_core::Error as E;
        match self {
            HarnessError::Config(_) | HarnessError::MixedHashes(_) => 2,
            HarnessError::Io { .. } => 1,
            HarnessError::Core(e) => match e {
                E::Numeric(_) | E::UpdateFailed { .. } | E::Domain(_) | E::Support(_) => 3,
                E::InvalidParameter(_) | E::ShapeMismatch(_) | E::FamilyMismatch { .. } => 2,
                E::Serialization(_) => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
