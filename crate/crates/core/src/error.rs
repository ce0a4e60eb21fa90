use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("refusing to overwrite existing output {0} (pass --force)")]
    OutputExists(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Phys(#[from] ctmar_phys::PhysError),
    #[error("serialization error: {0}")]
    Serde(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CoreError {
    /// Short category used by the CLI's one-line error report.
    pub fn category(&self) -> &'static str {
        match self {
            CoreError::InvalidArgument(_) => "invalid-argument",
            CoreError::MissingPrerequisite(_) => "missing-prerequisite",
            CoreError::CorruptCheckpoint { .. } => "corrupt-checkpoint",
            CoreError::OutputExists(_) => "output-exists",
            CoreError::Io { .. } => "io",
            CoreError::Tensor(_) => "tensor",
            CoreError::Phys(_) => "physics",
            CoreError::Serde(_) => "serialization",
            CoreError::Numerical(_) => "numerical",
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::InvalidArgument(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
