use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulation, dataset, learning or evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {dim}: {reason}")]
    InvalidDimension { dim: usize, reason: &'static str },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("Fock cutoff {cutoff} too small: tail population {tail:e} exceeds {limit:e}")]
    CutoffTooSmall { cutoff: usize, tail: f64, limit: f64 },

    #[error("integration blew up at t = {t}")]
    IntegrationBlowup { t: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite Wigner value at grid point ({iq}, {ip}); cutoff too small for grid extent")]
    NumericalOverflow { iq: usize, ip: usize },

    #[error("undefined similarity: zero-norm grid")]
    UndefinedSimilarity,

    #[error("grid mismatch between Wigner rasters")]
    GridMismatch,

    #[error("record (alpha = {alpha_re:+.4}{alpha_im:+.4}i, t = {t}, tau = {tau}): {source}")]
    Record {
        alpha_re: f64,
        alpha_im: f64,
        t: f64,
        tau: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated file: {0}")]
    Truncated(&'static str),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward already ran on this tape; reset before calling it again")]
    BackwardTwice,

    #[error("model config error: {0}")]
    ModelConfig(String),

    #[error("forward pass diverged (non-finite activations)")]
    DivergedForward,

    #[error("training diverged at step {step}: loss {loss}")]
    DivergedTraining { step: u64, loss: f32 },

    #[error("horizon violation: record with t = {t}, tau = {tau} exceeds training horizon {t_train}")]
    HorizonViolation { t: f64, tau: f64, t_train: f64 },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("iteration diverged at step {step}")]
    IterationDiverged { step: usize },

    #[error("at t = {t}: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
