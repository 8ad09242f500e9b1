use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} out of range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("zero projection: embedding norm {0:e} is below 1e-12")]
    ZeroProjection(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("degenerate squared error {0:e}: log(1 - exp(-mse/2)) is singular")]
    DegenerateMse(f64),

    #[error("invalid squared error {0}: must be finite and non-negative")]
    InvalidErrors(f64),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("unknown loss kind `{0}`")]
    UnknownLossKind(String),

    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),

    #[error("invalid style transform: {0}")]
    InvalidTransform(String),

    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NonPsd(f64),

    #[error("median needs an odd sample count, got k = {0}")]
    InvalidK(usize),

    #[error("config conflict: {0}")]
    ConfigConflict(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(
        "training diverged at step {step}: loss was non-finite for {streak} consecutive steps"
    )]
    Divergence { step: usize, streak: usize },

    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
