use std::path::PathBuf;

/// Errors raised across the gaze-following pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("model state error: {0}")]
    State(String),

    #[error("checkpoint load failed; offending tensors: {}", .offending.join(", "))]
    Load { offending: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Parameter(_)
            | Error::Precondition(_)
            | Error::Config(_) => ErrorCategory::Validation,
            Error::Io { .. } | Error::Image { .. } | Error::Load { .. } | Error::Checkpoint(_) => {
                ErrorCategory::Io
            }
            Error::Degenerate(_)
            | Error::UndefinedMetric(_)
            | Error::State(_)
            | Error::Divergence { .. } => ErrorCategory::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Io,
    Runtime,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Validation => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Runtime => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
