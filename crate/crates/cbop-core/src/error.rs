use thiserror::Error;

pub type Result<T> = std::result::Result<T, CbopError>;

/// Error type shared across the crate. Variants map onto the failure classes
/// the command-line tool turns into exit codes: config, io/format, numeric
/// divergence, shape mismatch.
#[derive(Debug, Error)]
pub enum CbopError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("numeric divergence: {context}")]
    Divergence { context: String },

    #[error("model index {index} is not among the elite members")]
    NotElite { index: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown environment id {0:?}")]
    UnknownEnv(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CbopError {
    pub fn shape(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        CbopError::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn non_finite(context: impl ToString) -> Self {
        CbopError::NonFinite {
            context: context.to_string(),
        }
    }

    pub fn io(path: impl ToString, source: std::io::Error) -> Self {
        CbopError::Io {
            path: path.to_string(),
            source,
        }
    }
}

/// Errors for the on-disk dataset and checkpoint containers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated file in {section}: expected {expected} bytes, got {got} ({missing} missing)")]
    Truncated {
        section: &'static str,
        expected: usize,
        got: usize,
        missing: usize,
    },

    #[error("header parse error: {0}")]
    Header(String),

    #[error("stored header field disagrees with payload: {0}")]
    HeaderMismatch(String),
}

impl FormatError {
    pub fn truncated(section: &'static str, expected: usize, got: usize) -> Self {
        FormatError::Truncated {
            section,
            expected,
            got,
            missing: expected.saturating_sub(got),
        }
    }
}
