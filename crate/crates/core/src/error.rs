use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("trace does not match model: {0}")]
    TraceMismatch(String),

    #[error("invalid learning rate {0}")]
    LearningRate(f64),

    #[error("unexpected magic 0x{found:08x} (expected 0x{expected:08x})")]
    UnexpectedMagic { expected: u32, found: u32 },

    #[error("truncated IDX stream: {0}")]
    Truncated(String),

    #[error("image dimensions {rows}x{cols}, expected 28x28")]
    ImageDims { rows: u32, cols: u32 },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("step {step} out of range (stream has {total} steps)")]
    StepOutOfRange { step: usize, total: usize },

    #[error("memory empty")]
    MemoryEmpty,

    #[error("probability {0} outside (0, 1)")]
    Probability(f64),

    #[error("need at least 2 risk values, got {0}")]
    TooFewRisks(usize),

    #[error("negative risk {0} under a nonnegative loss")]
    NegativeRisk(f64),

    #[error("no evaluation set for rotation {0}")]
    MissingRotation(i32),

    #[error("invalid sample: {0}")]
    Sample(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] io::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
