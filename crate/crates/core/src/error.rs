use alloc::string::String;

/// Errors raised by the carving pipeline and its numeric kernel.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("backward called without a recorded forward pass")]
    NoForwardPass,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("no usable concepts")]
    NoUsableConcepts,
    #[error("selector coverage collapsed to {coverage:.3e}")]
    CoverageCollapse { coverage: f64 },
    #[error("undefined score: {0}")]
    UndefinedScore(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            found,
        })
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
