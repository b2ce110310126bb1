use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{} already exists; pass --overwrite to replace it", .0.display())]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] tabdeco_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for configuration problems, 2 for data problems, 3 for numeric
    /// failures.
    pub fn exit_code(&self) -> u8 {
        use tabdeco_core::Error as E;
        match self {
            CliError::Config(_) | CliError::OutputExists(_) => 1,
            CliError::Io { .. } => 2,
            CliError::GradCheck(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::ConfigMismatch(_) => 1,
                E::Data(_)
                | E::Io { .. }
                | E::Csv(_)
                | E::Checkpoint(_)
                | E::CheckpointVersion { .. }
                | E::UndefinedMetric(_) => 2,
                E::Shape { .. }
                | E::Invalid { .. }
                | E::NonScalarLoss(_)
                | E::DegenerateContrast(_)
                | E::NonFinite(_)
                | E::MissingGradient(_)
                | E::NonDeterministic { .. } => 3,
            },
        }
    }
}
