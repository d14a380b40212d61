use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("no scene metadata for image `{0}`")]
    MissingMetadata(String),

    #[error("request timed out")]
    Timeout,

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("captioning service returned status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("captioning service unavailable after {attempts} attempt(s): {last}")]
    ProviderUnavailable { attempts: u32, last: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("caption text must not be empty")]
    EmptyCaption,

    #[error(transparent)]
    Data(#[from] vlmir_data::DataError),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CaptionError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            CaptionError::Timeout | CaptionError::Transport(_) => true,
            CaptionError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CaptionError>;
