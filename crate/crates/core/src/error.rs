use std::io;

/// Errors raised across the simulation, reconstruction and training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: hi ({hi}) must exceed lo ({lo})")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("wrong sinogram stage: expected {expected}, found {found}")]
    Stage {
        expected: &'static str,
        found: &'static str,
    },
    #[error("porosity target {target:.3} unreachable, achieved {achieved:.3}")]
    Porosity { target: f64, achieved: f64 },
    #[error("topology mismatch:\n{0}")]
    Topology(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss} (learning rate too high?)")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn dims(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
