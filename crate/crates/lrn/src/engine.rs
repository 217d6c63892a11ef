//! Data-parallel batch engine.

use lrn_core::tasks::TaskInstance;
use lrn_core::training::BatchEngine;
use rayon::prelude::*;

/// Maps examples over the rayon pool. `collect` keeps input order, so the
/// reduction that follows sums in the same order as [`lrn_core::training::Sequential`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Parallel;

impl BatchEngine for Parallel {
    fn map_examples<R, F>(&self, items: &[TaskInstance<f64>], f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&TaskInstance<f64>) -> R + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }
}
