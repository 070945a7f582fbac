use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor extents must be positive, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, buffer has {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("variable does not belong to this tape")]
    NotOnTape,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("attention map sum {sum} is below the rescale guard")]
    DegenerateMap { sum: f64 },
    #[error("{what}: enumeration of {size} items exceeds the limit")]
    EnumerationTooLarge { what: &'static str, size: u128 },
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
