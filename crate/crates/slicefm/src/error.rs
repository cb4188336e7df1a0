use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user input or configuration; names the offending field.
    #[error("validation error: {field}: {message}")]
    Validation { field: String, message: String },

    /// Sizes, shapes, or index ranges that cannot be satisfied.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Volume file whose magic or header cannot be parsed.
    #[error("malformed volume header: {0}")]
    MalformedHeader(String),

    /// Volume file shorter than its header promises.
    #[error("truncated volume payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    /// Volume payload whose checksum does not match the stored one.
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// Training aborted on a non-finite loss or gradient.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), message: message.into() }
    }

    pub fn geometry(message: impl Into<String>) -> Self {
        Error::Geometry(message.into())
    }

    /// Process exit code for the CLI: 2 for bad input, 3 for runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Geometry(_) => 2,
            _ => 3,
        }
    }
}
