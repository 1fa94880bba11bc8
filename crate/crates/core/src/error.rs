use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes violate an operation's contract.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// Every entry of a softmax row was masked out.
    EmptyAttentionRow {
        row: usize,
    },
    /// Rotary embedding needs coordinate pairs.
    OddRopeDim {
        dim: usize,
    },
    /// A computation produced NaN or infinity.
    NonFinite {
        context: String,
    },
    /// A clean frame arrived out of order, or a forward pass targeted a frame
    /// the state already absorbed.
    FrameOrder {
        expected: i64,
        got: i64,
    },
    /// Backward pass reached an operation without an adjoint.
    UnregisteredAdjoint {
        op: String,
    },
    /// Gradient requested for a tensor outside the trainable set.
    FrozenParameter {
        name: String,
    },
    /// Training loss stopped being finite.
    Divergence {
        step: usize,
    },
    InvalidArgument {
        detail: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::EmptyAttentionRow { row } => {
                write!(f, "softmax row {row} is fully masked (empty attention window)")
            }
            Error::OddRopeDim { dim } => write!(f, "rope needs an even dimension, got {dim}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::FrameOrder { expected, got } => {
                write!(f, "frame order violated: expected frame {expected}, got {got}")
            }
            Error::UnregisteredAdjoint { op } => {
                write!(f, "operation `{op}` has no registered adjoint")
            }
            Error::FrozenParameter { name } => write!(f, "parameter `{name}` is frozen"),
            Error::Divergence { step } => write!(f, "training diverged at step {step}"),
            Error::InvalidArgument { detail } => write!(f, "invalid argument: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
