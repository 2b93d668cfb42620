use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A precondition on shapes, ranges or arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The input is numerically degenerate (zero-norm rows, all-zero spectra, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    /// Optimization produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Divergence(String),
    /// Invalid configuration (too few classes, incompatible checkpoints, ...).
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::Error::Contract(alloc::format!($($arg)*))
    };
}

pub(crate) use contract;
