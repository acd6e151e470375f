use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("forward trace does not belong to this network: {0}")]
    StaleTrace(String),

    #[error("invalid scale vector: {0}")]
    InvalidAlpha(String),

    #[error("layer {layer}: curvature {value:e} is negative beyond rounding tolerance (scale {scale:e})")]
    NegativeCurvature { layer: usize, value: f64, scale: f64 },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    #[error("oracle refused: {0}")]
    OracleTooLarge(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding IDX containers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}
