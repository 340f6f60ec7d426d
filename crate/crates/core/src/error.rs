//! Crate-wide error type.

use crate::padding::Extent;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("data length {got} does not match shape volume {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("padding on the {axis} axis is infeasible: total would be {total}")]
    InfeasiblePadding { axis: &'static str, total: i64 },

    #[error("output extent on the {axis} axis is empty (numerator {numerator})")]
    EmptyOutput { axis: &'static str, numerator: i64 },

    #[error("padding {padding} on the {axis} axis is not smaller than the kernel span {span}; the requested output overruns what the input can produce")]
    PaddingBeyondReach {
        axis: &'static str,
        padding: usize,
        span: usize,
    },

    #[error("{layer} output {got} is not square; orientation blocks cannot stack")]
    NonSquareOutput { layer: &'static str, got: Extent },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("malformed file: {0}")]
    BadFileFormat(String),

    #[error("tensor dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
