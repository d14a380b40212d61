use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),

    #[error("image {height}x{width} is too small for an {window}x{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },

    #[error("missing restored images for ids: {}", .0.join(", "))]
    MissingRestored(Vec<String>),

    #[error("record `{id}`: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<EvalError>,
    },

    #[error("reports do not share metric columns: {0:?} vs {1:?}")]
    InconsistentColumns(Vec<String>, Vec<String>),

    #[error("no reports to tabulate")]
    EmptyReports,

    #[error(transparent)]
    Data(#[from] vlmir_data::DataError),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
