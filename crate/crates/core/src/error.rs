use alloc::string::String;

/// Errors raised by the numerical core.
///
/// Dimension and configuration errors are programming or config mistakes and
/// callers generally treat them as fatal. The remaining variants describe
/// data that cannot satisfy a request.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{what} is not a probability distribution (sum {sum})")]
    NotNormalized { what: &'static str, sum: f64 },
    #[error("parameters are frozen")]
    Frozen,
    #[error("no gradients were accumulated since the last step")]
    NoGradients,
    #[error("only {available} candidates available, {needed} required")]
    InsufficientCandidates { available: usize, needed: usize },
    #[error("domain {domain:?} offers {available} windows, quota is {needed}")]
    InsufficientWindows {
        domain: String,
        available: usize,
        needed: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
