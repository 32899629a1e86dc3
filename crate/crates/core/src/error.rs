use std::path::PathBuf;

/// Errors produced by the engine.
///
/// Every variant maps to a stable, module-qualified code (see [`Error::code`])
/// so command-line front ends can emit machine-parsable diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input in {op}: row {row} has zero norm")]
    Degenerate { op: &'static str, row: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("stream '{stream}' size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch {
        stream: String,
        expected: u64,
        found: u64,
    },

    #[error("stream '{stream}' holds a non-finite value at flat index {index}")]
    NonFiniteInput { stream: String, index: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: usize, term: &'static str },
}

impl Error {
    /// Stable `module.kind` identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "numkernel.dimension",
            Error::Parameter(_) => "config.parameter",
            Error::Degenerate { .. } => "numkernel.degenerate",
            Error::Io { .. } => "io.file",
            Error::Manifest { .. } => "databank.manifest",
            Error::SizeMismatch { .. } => "databank.size_mismatch",
            Error::NonFiniteInput { .. } => "databank.non_finite",
            Error::Checkpoint(_) => "model.checkpoint",
            Error::NonFiniteLoss { .. } => "trainer.non_finite_loss",
        }
    }

    /// True for errors caused by missing or unreadable inputs rather than by computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Manifest { .. }
                | Error::SizeMismatch { .. }
                | Error::NonFiniteInput { .. }
                | Error::Checkpoint(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
