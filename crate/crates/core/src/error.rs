use thiserror::Error;

/// Errors raised across the library.
///
/// Variants are grouped so the CLI can map each to an exit code:
/// invalid arguments, bad data on disk, and numerical failures.
#[derive(Debug, Error)]
pub enum TufaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("landmark {index} is valid in no sample")]
    NoValidLandmark { index: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("index {index} out of range for {len} landmarks")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("landmark count mismatch: expected {expected}, found {found}{}", context_suffix(.context))]
    CountMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl TufaError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TufaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Coarse category used by the command-line front end.
    pub fn kind(&self) -> ErrorKind {
        match self {
            TufaError::InvalidArgument(_)
            | TufaError::ShapeMismatch(_)
            | TufaError::Empty(_)
            | TufaError::UnknownDataset(_)
            | TufaError::IndexOutOfRange { .. } => ErrorKind::Usage,
            TufaError::NoValidLandmark { .. }
            | TufaError::CountMismatch { .. }
            | TufaError::Parse { .. }
            | TufaError::Io { .. }
            | TufaError::Image { .. }
            | TufaError::Serde(_) => ErrorKind::Data,
            TufaError::DegenerateFit(_) | TufaError::NonFinite(_) => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl From<serde_json::Error> for TufaError {
    fn from(e: serde_json::Error) -> Self {
        TufaError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TufaError>;
