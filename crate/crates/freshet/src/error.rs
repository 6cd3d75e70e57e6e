//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: [usize; 3], got: [usize; 3] },

    #[error("raster dimension mismatch: expected {expected:?}, got {got:?}")]
    RasterMismatch { expected: (usize, usize), got: (usize, usize) },

    #[error("inlet and outlet planes overlap")]
    OverlappingPlanes,

    #[error("particle {index} outside padded grid bounds at {position:?}")]
    ParticleOutOfBounds { index: usize, position: [f64; 3] },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("numerical blow-up at rollout step {step}")]
    RolloutBlowup { step: usize },

    #[error("gradient tape incomplete: {0}")]
    IncompleteTape(String),

    #[error("singular transform: {0}")]
    SingularTransform(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error in {file} at offset {offset}: {message}")]
    Parse {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
