use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("graph is not topologically ordered at node {0}")]
    GraphCycle(usize),

    #[error("{op}: value out of range: {detail}")]
    OutOfRange { op: &'static str, detail: String },

    #[error("feature collapse in {op}: vector norm {norm:e} below 1e-12")]
    Collapse { op: &'static str, norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error("ppm: {0}")]
    Ppm(#[from] PpmError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite loss component {component} at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },

    #[error("frozen parameters changed during stage: {0}")]
    FrozenChanged(&'static str),

    #[error("gradient checks failed: {0}")]
    GradcheckFailed(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (CLI exit code 1) as opposed to
    /// failures while running (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownConfigKeys(_)
                | Error::InvalidArgument(_)
                | Error::Dataset(_)
                | Error::MissingTensor(_)
                | Error::Ppm(_)
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("bad magic number, expected P6")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0}, only 255 is supported")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image must have 3 channels, got {0}")]
    Channels(usize),
}
