//! Error type shared by tensor construction and tape operations.

use std::fmt;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape product does not match the provided data length.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// A shape with a zero extent (or no extents where some are required).
    EmptyShape { shape: Vec<usize> },
    /// Two operands whose shapes cannot be combined by the given op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An op was asked to run on a rank it does not support.
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Axis index out of range for the tensor's rank.
    InvalidAxis { axis: usize, rank: usize },
    /// An op parameter combination that produces a non-positive output extent
    /// or is otherwise outside the op's domain.
    InvalidParam { op: &'static str, detail: String },
    /// NaN or infinity encountered where finite data is required.
    NonFinite { context: String },
    /// An element index outside the addressed buffer.
    IndexOutOfRange { index: usize, len: usize },
    /// `backward` was called on a non-scalar output.
    NonScalarLoss { len: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {:?} requires {} values, got {}", shape, shape.iter().product::<usize>(), len)
            }
            TensorError::EmptyShape { shape } => write!(f, "shape {:?} has a zero extent", shape),
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{}: incompatible shapes {:?} and {:?}", op, lhs, rhs)
            }
            TensorError::RankMismatch { op, expected, got } => {
                write!(f, "{}: expected rank {}, got rank {}", op, expected, got)
            }
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {} out of range for rank {}", axis, rank)
            }
            TensorError::InvalidParam { op, detail } => write!(f, "{}: {}", op, detail),
            TensorError::NonFinite { context } => write!(f, "non-finite value in {}", context),
            TensorError::IndexOutOfRange { index, len } => {
                write!(f, "index {} out of range for buffer of length {}", index, len)
            }
            TensorError::NonScalarLoss { len } => {
                write!(f, "backward requires a scalar output, got {} elements", len)
            }
        }
    }
}

impl std::error::Error for TensorError {}
