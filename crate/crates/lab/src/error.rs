use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{0}")]
    Diverged(ssa_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(ssa_core::Error),
    #[error("report error: {0}")]
    Report(String),
}

impl LabError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> LabError {
        let context = context.into();
        move |source| LabError::Io { context, source }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Data(_) | LabError::Checkpoint { .. } => 3,
            LabError::Diverged(_) => 4,
            LabError::Io { .. } | LabError::Core(_) | LabError::Report(_) => 1,
        }
    }
}

impl From<ssa_core::Error> for LabError {
    fn from(e: ssa_core::Error) -> Self {
        use ssa_core::Error as E;
        match e {
            E::Config(m) => LabError::Config(m),
            E::Diverged { .. }
            | E::NonFiniteLoss { .. }
            | E::NonFiniteGradient { .. }
            | E::NonFinite { .. } => LabError::Diverged(e),
            E::TokenOutOfRange { .. } | E::InvalidInput(_) => LabError::Data(e.to_string()),
            other => LabError::Core(other),
        }
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Report(e.to_string())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Report(e.to_string())
    }
}
