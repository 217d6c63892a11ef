//! Lightweight recurrent network (LRN) kernels.
//!
//! Everything parameterised by a weight matrix is computed before the
//! recurrence starts; the loop itself is purely elementwise. The crate holds
//! the cell family (LRN, oLRN, gLRN, eLRN and an Elman baseline) with exact
//! reverse-mode gradients, the closed-form expansion of LRN hidden states into
//! per-token weights, one-step Jacobians, the training primitives and the
//! synthetic task generators.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and timing live in the `lrn` companion crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod analysis;
pub mod cells;
pub mod decomposition;
mod error;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use cells::{Activation, CellKind, CellParams, GradientSet, Trajectory};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Matrix, Real};
