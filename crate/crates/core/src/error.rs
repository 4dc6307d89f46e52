use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NbfError>;

#[derive(Debug, Error)]
pub enum NbfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("numeric overflow at layer {layer}: {message}")]
    NumericOverflow { layer: usize, message: String },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    TrainingDiverged {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },

    #[error("time {t} s is outside the model domain [{start}, {end}] s")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("empty aggregate: every channel was excluded")]
    EmptyAggregate,

    #[error("missing coverage: {0}")]
    MissingCoverage(String),

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<NbfError>,
    },

    #[error("method {method}: {source}")]
    InMethod {
        method: String,
        #[source]
        source: Box<NbfError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NbfError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NbfError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        NbfError::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NbfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips `AtSample` and `InMethod` wrappers.
    pub fn root(&self) -> &NbfError {
        match self {
            NbfError::AtSample { source, .. } | NbfError::InMethod { source, .. } => source.root(),
            other => other,
        }
    }
}
