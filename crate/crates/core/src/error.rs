use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidShape(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("iteration {iter} outside schedule range [0, {max_iter})")]
    IterationOutOfRange { iter: u64, max_iter: u64 },

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error(
        "non-finite loss at iteration {iteration} (lr {lr}); batch ids {batch:?}"
    )]
    NonFiniteLoss {
        iteration: u64,
        lr: f64,
        batch: Vec<String>,
    },

    #[error("weight import failed, shape mismatch for {0:?}")]
    ImportShapeMismatch(Vec<String>),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("invalid transform: {0}")]
    Transform(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint digest mismatch (stored {stored:016x}, computed {computed:016x})")]
    DigestMismatch { stored: u64, computed: u64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
