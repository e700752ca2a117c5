use std::path::{Path, PathBuf};

/// Errors surfaced by the command layer, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] dptq_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible inputs: {0}")]
    Compat(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("run directory {0} is locked by another command")]
    Busy(PathBuf),
    #[error("report output failed: {0}")]
    Report(String),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 ok, 1 other failures, 2 config or compatibility, 3 infeasible
    /// budget, 4 training divergence.
    pub fn exit_code(&self) -> u8 {
        use dptq_core::Error as E;
        match self {
            LabError::Core(E::BudgetInfeasible { .. }) => 3,
            LabError::Core(E::Diverged { .. }) => 4,
            LabError::Core(E::Config(_) | E::Dimension { .. } | E::Contract(_)) => 2,
            LabError::Config(_) | LabError::Compat(_) | LabError::Checkpoint { .. } | LabError::Busy(_) => 2,
            _ => 1,
        }
    }
}
