//! Crate error type: tensor failures plus the model's own contract errors.

use std::fmt;

use numcore::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    Tensor(TensorError),
    /// Text that normalizes to zero tokens; the sample has no usable
    /// description.
    EmptyText,
    /// Image loading, saving, format or dimension problems.
    Image(String),
    /// A module configuration that cannot produce the requested shapes.
    Build(String),
    /// An external helper process that failed or misbehaved.
    External(String),
    /// A numeric result outside tolerance: a gradient mismatch or a
    /// non-finite loss.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Tensor(e) => write!(f, "{}", e),
            Error::EmptyText => write!(f, "text is empty after normalization; missing description"),
            Error::Image(msg) => write!(f, "image: {}", msg),
            Error::Build(msg) => write!(f, "build: {}", msg),
            Error::External(msg) => write!(f, "external command: {}", msg),
            Error::Numeric(msg) => write!(f, "numeric: {}", msg),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Tensor(e)
    }
}
