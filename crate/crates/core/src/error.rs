use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible, or an axis is out of range.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value lies outside the domain of an operation (e.g. `log` of a non-positive number).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an API contract (non-scalar loss, repeated backward, unnormalized rows...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    /// Training produced a non-finite loss or parameters. `last_good` holds the
    /// parameters as they were before the failing step.
    #[error("training diverged at epoch {epoch}, step {step}: {what} became non-finite (loss {loss})")]
    Diverged {
        epoch: usize,
        step: usize,
        what: &'static str,
        loss: f64,
        last_good: Box<crate::encoder::ParamSet>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than by the caller or the optimizer.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::LabelOutOfRange { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Unsupported(_)
        )
    }
}
