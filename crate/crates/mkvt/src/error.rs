//! Crate-wide error type.

/// Errors produced by any module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input value violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A domain-type invariant failed to hold.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// An iterative solver ran out of budget before reaching tolerance.
    #[error("failed to converge: {0}")]
    Convergence(String),

    /// A metric's denominator is empty, so the value is undefined.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed file contents (manifest, image, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// Recognized but unsupported file variant.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// Bad configuration or usage.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for usage/config problems, 3 for
    /// data/format problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format(_) | Error::UnsupportedFormat(_) | Error::Io(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
