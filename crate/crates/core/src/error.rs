use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum CdmError {
    #[error("not a CDME container (bad magic bytes)")]
    MagicMismatch,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("row {row} has norm {norm:e}, too small to normalize")]
    NormError { row: usize, norm: f64 },

    #[error("malformed container header: {0}")]
    Header(String),

    #[error("temperature must be positive, got {0}")]
    TemperatureError(f64),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    DivergenceError { epoch: usize, step: usize },

    #[error("class {0} has no examples")]
    EmptyClass(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CdmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// the environment or a numerical failure during a run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, CdmError::Io { .. } | CdmError::DivergenceError { .. })
    }
}

pub type Result<T, E = CdmError> = std::result::Result<T, E>;
