use crate::fno::FnoParams;
use crate::grid::Trajectory;
use crate::train::EpochLoss;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("reference has zero norm")]
    ZeroReference,

    #[error("stencil of width {width} does not fit a grid of {n} cells")]
    StencilTooWide { width: usize, n: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("CFL violated at step {step}: courant number {courant:.4} exceeds {limit}")]
    Cfl {
        step: usize,
        courant: f64,
        limit: f64,
    },

    #[error("batch is not time-contiguous: {0}")]
    NotContiguous(String),

    #[error("solution blew up at step {step} (max |u| = {max_abs:e})")]
    BlowUp {
        step: usize,
        max_abs: f64,
        partial: Box<Trajectory>,
    },

    #[error("training diverged in epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        history: Vec<EpochLoss>,
        last_good: Box<FnoParams>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported file version {0}")]
    Version(u32),

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
