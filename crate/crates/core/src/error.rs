use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("forward tape does not match this model or was already consumed")]
    StaleTape,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),

    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated IDX file")]
    Truncated { path: PathBuf },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("client {0} is not active")]
    InactiveClient(usize),

    #[error("degenerate loss value {0}; contribution undefined")]
    DegenerateLoss(f64),

    #[error("missing noise record for client {0}")]
    MissingNoiseRecord(usize),

    #[error("signal-to-noise ratio undefined for zero noise")]
    ZeroNoise,

    #[error("dropping {dropped:?} would leave {remaining} active client(s); at least 2 required")]
    InsufficientClients { dropped: Vec<usize>, remaining: usize },

    #[error("{0}")]
    Attack(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
