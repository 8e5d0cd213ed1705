use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor or input has the wrong shape for a contract (for example an
    /// image size that is not divisible by the pyramid stride).
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract, such as calling backward on a
    /// non-scalar loss.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("gradient check error: {0}")]
    GradCheck(String),

    #[error("metric error for task {task}: {reason}")]
    Metric { task: String, reason: String },

    #[error("division error: {0}")]
    Division(String),

    #[error("non-finite loss at step {step} in task {task}")]
    NonFinite { step: usize, task: String },

    /// A persisted file failed validation. `field` names the part of the
    /// layout that was wrong or missing.
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    /// Checkpoint manifest does not match the model built from the config.
    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
