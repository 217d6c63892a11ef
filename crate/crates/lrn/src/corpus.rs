//! Text corpus for the byte-level language model.

use std::path::Path;

use crate::error::{Error, Result};

/// Original English prose shipped with the crate.
pub const BUNDLED: &[u8] = include_bytes!("../data/corpus.txt");

/// Reads `path`, or returns the bundled corpus when `None`.
pub fn load(path: Option<&Path>) -> Result<Vec<u8>> {
    let bytes = match path {
        Some(p) => std::fs::read(p).map_err(|e| Error::io(p, e))?,
        None => BUNDLED.to_vec(),
    };
    lrn_core::tasks::check_corpus(&bytes)?;
    Ok(bytes)
}
