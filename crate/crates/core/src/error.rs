use std::fmt;

/// Errors raised across the toolkit.
///
/// The variants are grouped by the exit-code class the CLI maps them to:
/// everything except [`Error::Verification`] is a data/format failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter) disagree on shape.
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    Shape {
        op: &'static str,
        lhs: ShapeDisplay,
        rhs: ShapeDisplay,
    },

    /// An argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Input data violates a precondition (empty dataset, non-binary mask, ...).
    #[error("data error: {0}")]
    Data(String),

    /// An optional augmentation does not apply to this sample.
    #[error("skipped: {0}")]
    Skip(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file is not in the expected container format.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// A file is structurally damaged (truncated, inconsistent manifest).
    #[error("corrupted file: {0}")]
    Corrupt(String),

    /// A verification suite reported failures.
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: ShapeDisplay(lhs.to_vec()),
            rhs: ShapeDisplay(rhs.to_vec()),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

/// A shape rendered as `[2, 3, 4]` in error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDisplay(pub Vec<usize>);

impl fmt::Display for ShapeDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}
