use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported arity {arity}: {what} requires a binary tree")]
    UnsupportedArity { arity: usize, what: &'static str },

    #[error("source too large for exhaustive search: {items} items (max {max})")]
    TooLarge { items: usize, max: usize },

    #[error("precondition failed: beta {beta} is below the minimum admissible value {min_beta}")]
    BetaTooSmall { beta: f64, min_beta: f64 },

    #[error("router state error: {0}")]
    State(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("budget too small: bpp16 {bpp16} must exceed the mask overhead of 1/16")]
    BudgetTooSmall { bpp16: f64 },

    #[error(transparent)]
    Stream(#[from] StreamError),

    #[error("stale forward trace: parameters changed since the forward pass")]
    StaleTrace,

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("version mismatch: {0}")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Token stream parse failures.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported stream version {0}")]
    BadVersion(u8),

    #[error("truncated stream: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("trailing bytes: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("mask popcount {popcount} does not match n_x {n_x}")]
    PopcountMismatch { popcount: usize, n_x: usize },

    #[error("codebook index {index} out of range (codebook size {size})")]
    IndexOutOfRange { index: u64, size: u64 },

    #[error("invalid header: {0}")]
    Header(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
