//! Standard-library companion to `lrn-core`: parallel batch engine, model
//! checkpoints, metric logs, memory traces, self-checks and the recurrence
//! benchmark used by the `lrn` binary.

pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod corpus;
pub mod engine;
mod error;
pub mod metrics;
pub mod trace;

pub use error::{Error, Result};
