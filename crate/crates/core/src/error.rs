use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid comb {comb}: {reason}")]
    InvalidComb { comb: usize, reason: String },

    #[error("singular pilot at subcarrier {subcarrier}, port {port} (|s| = {magnitude:e})")]
    SingularPilot {
        subcarrier: usize,
        port: usize,
        magnitude: f64,
    },

    #[error("insufficient points for {method} interpolation: have {have}, need {need}")]
    InsufficientPoints {
        method: &'static str,
        have: usize,
        need: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameters: {0:?}")]
    MissingGrad(Vec<String>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("index {index} out of range for table of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("too many tokens: {have} > {max}")]
    TokenOverflow { have: usize, max: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("svd failed: {0}")]
    Svd(String),

    #[error("missing checkpoint for {0}")]
    MissingCheckpoint(String),

    #[error("{path}:{line}: {msg}")]
    ConfigParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("bad container: {0}")]
    Container(String),

    #[error("checksum mismatch in record `{record}`: header {expected:#018x}, payload {actual:#018x}")]
    Checksum {
        record: String,
        expected: u64,
        actual: u64,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
