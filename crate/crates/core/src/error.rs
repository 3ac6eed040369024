use std::io;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A numerical guarantee was broken (e.g. a non-Hermitian spectrum
    /// produced a complex image).
    #[error("numerical contract violated: {0}")]
    NumericalContract(String),

    /// A caller-supplied closure broke its contract (e.g. non-determinism).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("training diverged at iteration {iteration}: non-finite {term}")]
    Divergence { iteration: u64, term: String },

    #[error("config hash mismatch: checkpoint {checkpoint:016x}, config {config:016x}")]
    ConfigMismatch { checkpoint: u64, config: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
