use alloc::string::String;

use crate::cells::CellKind;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data has {found} values, expected {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        found: usize,
    },

    #[error("{what} {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("operation requires {expected} but got a {found:?} cell")]
    WrongCellKind {
        expected: &'static str,
        found: CellKind,
    },

    #[error("hidden-state expansion requires {0}")]
    InvalidExpansion(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },

    #[error("corpus has {len} bytes, need at least {min}")]
    CorpusTooSmall { len: usize, min: usize },

    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },
}
