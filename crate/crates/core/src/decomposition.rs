//! Closed-form expansion of LRN hidden states into per-token weights.
//!
//! With an identity activation and a zero initial state,
//! `h_t = Σ_{k≤t} i_k ⊙ (f_{k+1} ⊙ … ⊙ f_t) ⊙ v_k`. The input gate `i_k`
//! plays the role of a key, the forget chain the role of a query and `v_k`
//! the value; the weights are per channel and never normalised.
//!
//! Positions here are 1-based, `1..=n`.

use alloc::vec;
use alloc::vec::Vec;

use crate::cells::{Activation, CellKind, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Weight of source token `k` in the state at position `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightChain<T = f64> {
    pub t: usize,
    pub k: usize,
    /// `i_k`.
    pub key: Matrix<T>,
    /// `f_{k+1} ⊙ … ⊙ f_t`, all ones when `k == t`.
    pub query: Matrix<T>,
    /// `key ⊙ query`.
    pub weight: Matrix<T>,
}

/// Channel-mean weight of one source token across evaluation positions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayCurve {
    pub source: usize,
    /// Entry `j` is the mean weight at position `source + j`.
    pub values: Vec<f64>,
}

impl DecayCurve {
    pub fn at(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.source).and_then(|j| self.values.get(j).copied())
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("curve has at least the source position")
    }
}

fn check_gated<T: Real>(traj: &Trajectory<T>) -> Result<()> {
    if !traj.kind.is_gated() {
        return Err(Error::WrongCellKind {
            expected: "a gated",
            found: traj.kind,
        });
    }
    Ok(())
}

fn check_expandable<T: Real>(traj: &Trajectory<T>) -> Result<()> {
    if matches!(traj.kind, CellKind::Olrn | CellKind::Elman) {
        return Err(Error::WrongCellKind {
            expected: "an lrn, glrn or elrn",
            found: traj.kind,
        });
    }
    if traj.activation != Activation::Identity {
        return Err(Error::InvalidExpansion("an identity activation"));
    }
    if traj.h0.iter().any(|&h| h != T::zero()) {
        return Err(Error::InvalidExpansion("a zero initial state"));
    }
    Ok(())
}

fn check_position<T: Real>(traj: &Trajectory<T>, t: usize) -> Result<()> {
    if t == 0 || t > traj.len() {
        return Err(Error::OutOfRange {
            what: "position",
            index: t,
            len: traj.len(),
        });
    }
    Ok(())
}

fn chain<T: Real>(traj: &Trajectory<T>, t: usize, k: usize, query: Vec<T>) -> WeightChain<T> {
    let key = traj.steps[k - 1].input_gate.clone();
    let weight = key.iter().zip(&query).map(|(&a, &b)| a * b).collect();
    WeightChain {
        t,
        k,
        key: Matrix::row_vector(key),
        query: Matrix::row_vector(query),
        weight: Matrix::row_vector(weight),
    }
}

/// One weight, computed on demand in `O((t − k)·d)`.
pub fn weight_chain<T: Real>(traj: &Trajectory<T>, t: usize, k: usize) -> Result<WeightChain<T>> {
    check_gated(traj)?;
    check_position(traj, t)?;
    check_position(traj, k)?;
    if k > t {
        return Err(Error::OutOfRange {
            what: "source position",
            index: k,
            len: t,
        });
    }
    let mut query = vec![T::one(); traj.d()];
    for l in k + 1..=t {
        for (q, &f) in query.iter_mut().zip(&traj.steps[l - 1].forget_gate) {
            *q = *q * f;
        }
    }
    Ok(chain(traj, t, k, query))
}

/// All weights feeding position `t`, for `k = 1..=t`.
pub fn attention_weights<T: Real>(traj: &Trajectory<T>, t: usize) -> Result<Vec<WeightChain<T>>> {
    check_expandable(traj)?;
    check_position(traj, t)?;
    let mut query = vec![T::one(); traj.d()];
    let mut out = Vec::with_capacity(t);
    for k in (1..=t).rev() {
        out.push(chain(traj, t, k, query.clone()));
        for (q, &f) in query.iter_mut().zip(&traj.steps[k - 1].forget_gate) {
            *q = *q * f;
        }
    }
    out.reverse();
    Ok(out)
}

/// `h_t` rebuilt from its weights: `Σ_k w(t, k) ⊙ v_k`.
pub fn expand_hidden<T: Real>(traj: &Trajectory<T>, t: usize) -> Result<Matrix<T>> {
    let weights = attention_weights(traj, t)?;
    let values = traj.projections.value();
    let mut h = vec![T::zero(); traj.d()];
    for w in &weights {
        for ((acc, &wj), &vj) in h.iter_mut().zip(w.weight.data()).zip(values.row(w.k - 1)) {
            *acc = *acc + wj * vj;
        }
    }
    Ok(Matrix::row_vector(h))
}

/// Largest `|expand_hidden(t) − h_t|` over all positions.
pub fn max_expansion_error<T: Real>(traj: &Trajectory<T>) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 1..=traj.len() {
        let e = expand_hidden(traj, t)?;
        for (a, b) in e.data().iter().zip(&traj.steps[t - 1].hidden) {
            worst = worst.max((*a - *b).abs().as_f64());
        }
    }
    Ok(worst)
}

fn mean<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.as_f64()).sum::<f64>() / xs.len() as f64
}

/// Decay of source token `k`: channel-mean of `i_k ⊙ Π f` for `t = k..=n`.
/// Defined from the gates alone, so any activation works.
pub fn memory_trace<T: Real>(traj: &Trajectory<T>, k: usize) -> Result<DecayCurve> {
    check_gated(traj)?;
    check_position(traj, k)?;
    let mut w = traj.steps[k - 1].input_gate.clone();
    let mut values = Vec::with_capacity(traj.len() - k + 1);
    values.push(mean(&w));
    for step in &traj.steps[k..] {
        for (wj, &f) in w.iter_mut().zip(&step.forget_gate) {
            *wj = *wj * f;
        }
        values.push(mean(&w));
    }
    Ok(DecayCurve { source: k, values })
}

/// Every decay curve of the sequence (dense `O(n²)` dump).
pub fn all_memory_traces<T: Real>(traj: &Trajectory<T>) -> Result<Vec<DecayCurve>> {
    (1..=traj.len()).map(|k| memory_trace(traj, k)).collect()
}
