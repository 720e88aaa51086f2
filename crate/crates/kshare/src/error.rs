use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] kshare_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: expected {expected} bytes, found {actual}", path.display())]
    FileSize { path: PathBuf, expected: u64, actual: u64 },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error("checkpoint {}: {reason} at byte offset {offset}", path.display())]
    Checkpoint { path: PathBuf, offset: u64, reason: String },
    #[error("architecture mismatch: {}", .0.join("; "))]
    Mismatch(Vec<String>),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}; last good checkpoint {}", checkpoint.display())]
    Diverged {
        what: String,
        epoch: usize,
        batch: usize,
        checkpoint: PathBuf,
    },
    #[error("gradient check failed: {name} has relative error {rel_err:e} (tolerance {tol:e})")]
    Gradcheck { name: String, rel_err: f64, tol: f64 },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(kshare_core::Error::Isomorphism { .. }) => "isomorphism",
            Error::Core(kshare_core::Error::SharedBatchNorm { .. }) => "shared_batchnorm",
            Error::Core(kshare_core::Error::NonFiniteGradient { .. }) => "non_finite_gradient",
            Error::Core(_) => "engine",
            Error::Io { .. } => "io",
            Error::FileSize { .. } => "file_size",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Mismatch(_) => "architecture_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Gradcheck { .. } => "gradcheck",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
