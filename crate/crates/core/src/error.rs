use alloc::string::String;
use core::fmt;

/// Errors produced by the pure algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two arrays that must agree in shape do not.
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// An argument violates a documented precondition.
    InvalidArgument(String),
    /// View sampling could not find a mutual region within the retry budget.
    ViewGeneration { image: usize, attempts: usize },
    /// The training objective became NaN or infinite.
    NonFiniteLoss { step: u64, detail: String },
    /// A serialized checkpoint could not be decoded.
    Checkpoint(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { what, expected, found } => write!(
                f,
                "{what}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ViewGeneration { image, attempts } => write!(
                f,
                "image {image}: no view set with a mutual region after {attempts} attempts"
            ),
            Error::NonFiniteLoss { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
