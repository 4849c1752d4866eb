use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("missing checkpoint tensor `{0}`")]
    MissingTensor(String),

    #[error("missing prerequisite checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("non-finite value in loss term `{0}`")]
    NonFinite(String),

    #[error("edit with alpha = 10 cannot be inverted")]
    SingularEdit,

    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    #[error("labels contain a single class; both classes are required")]
    DegenerateLabels,

    #[error("too few samples: got {got}, need at least {min}")]
    TooFewSamples { got: usize, min: usize },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    /// Stable machine-readable code, used by the CLI error line and the HTTP service.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::Shape(_) => "shape_mismatch",
            Error::Config(_) => "config",
            Error::Integrity(_) => "checkpoint_integrity",
            Error::MissingTensor(_) => "checkpoint_missing_tensor",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::NonFinite(_) => "non_finite",
            Error::SingularEdit => "singular_edit",
            Error::InvalidEdit(_) => "invalid_edit",
            Error::DegenerateLabels => "degenerate_labels",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
            Error::Torch(_) => "torch",
        }
    }
}
