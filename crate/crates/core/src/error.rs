use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },

    #[error("batch_norm: degenerate statistics, channel has {count} element(s) in train mode (need at least 2)")]
    DegenerateStatistics { count: usize },

    #[error("label value {value} at index {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for trainable parameter #{index}")]
    MissingGradient { index: usize },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("unknown finding name {name:?} on line {line}")]
    UnknownFinding { line: usize, name: String },

    #[error("line {line}: \"No Finding\" cannot be combined with a pathology")]
    ConflictingNoFinding { line: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("ROC curve undefined: labels contain only one class")]
    UndefinedCurve,

    #[error("non-finite training loss in stage {stage}, epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss {
        stage: usize,
        epoch: usize,
        iteration: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            dim,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config values, flags,
    /// malformed specs) as opposed to failures while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
