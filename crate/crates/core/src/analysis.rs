//! One-step Jacobians and backward gradient-norm profiles.

use alloc::vec::Vec;

use crate::cells::{backward_recurrence, forward_sequence, Activation, CellKind, CellParams, StepView};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Diagonal of `∂h_t/∂h_{t−1}` for LRN, gLRN and eLRN:
/// `(σ_i'⊙v − h_prev⊙σ_f' + f) ⊙ g'(u)` with `σ' = s(1−s)`.
///
/// For the complementary cells `i = 1 − f`, so `i(1−i) = f(1−f)` and the
/// same expression holds. The off-diagonal entries are exactly zero.
pub fn lrn_jacobian_diag<T: Real>(kind: CellKind, step: &StepView<'_, T>, g: Activation) -> Result<Matrix<T>> {
    if !matches!(kind, CellKind::Lrn | CellKind::Glrn | CellKind::Elrn) {
        return Err(Error::WrongCellKind {
            expected: "an lrn, glrn or elrn",
            found: kind,
        });
    }
    let c = step.cache;
    let one = T::one();
    let diag = (0..c.hidden.len())
        .map(|j| {
            let i = c.input_gate[j];
            let f = c.forget_gate[j];
            let a = i * (one - i) * step.v[j] - step.h_prev[j] * f * (one - f) + f;
            a * g.derivative_from_value(c.hidden[j])
        })
        .collect();
    Ok(Matrix::row_vector(diag))
}

/// Full `∂h_t/∂h_{t−1}` of an Elman step: `Uᵀ` with row `j` scaled by
/// `g'(a_j)`.
pub fn elman_jacobian<T: Real>(params: &CellParams<T>, step: &StepView<'_, T>) -> Result<Matrix<T>> {
    if params.kind() != CellKind::Elman {
        return Err(Error::WrongCellKind {
            expected: "an elman",
            found: params.kind(),
        });
    }
    let u = params.weights.u.as_ref().expect("elman has U");
    let g = params.activation();
    let mut jac = u.transpose();
    for j in 0..params.d() {
        let gp = g.derivative_from_value(step.cache.hidden[j]);
        for v in jac.row_mut(j) {
            *v = *v * gp;
        }
    }
    Ok(jac)
}

/// `‖∂L/∂h_t‖₂` for `t = n, n−1, …, 1` when the loss only touches the final
/// state.
#[derive(Clone, Debug, PartialEq)]
pub struct NormProfile {
    pub kind: CellKind,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    /// `norms[0]` is step `n`, the last entry step 1.
    pub norms: Vec<f64>,
}

impl NormProfile {
    /// `max / min` over all steps.
    pub fn max_min_ratio(&self) -> f64 {
        let max = self.norms.iter().copied().fold(0.0, f64::max);
        let min = self.norms.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }

    /// `‖∂L/∂h_1‖ / ‖∂L/∂h_n‖`: above one the gradient grew on its way back,
    /// below one it shrank.
    pub fn end_to_end_ratio(&self) -> f64 {
        self.norms.last().copied().unwrap_or(1.0) / self.norms.first().copied().unwrap_or(1.0)
    }
}

/// Forward over `x`, then backward with upstream gradient `dh_final` on the
/// last step only. `seed` is recorded for provenance.
pub fn gradient_norm_profile<T: Real>(params: &CellParams<T>, x: &Matrix<T>, dh_final: &[T], seed: u64) -> Result<NormProfile> {
    let n = x.rows();
    let d = params.d();
    if dh_final.len() != d {
        return Err(Error::Shape {
            op: "final-state gradient",
            left: (1, dh_final.len()),
            right: (1, d),
        });
    }
    let traj = forward_sequence(params, x, None)?;
    let mut dh = Matrix::zeros(n, d);
    if n > 0 {
        dh.row_mut(n - 1).copy_from_slice(dh_final);
    }
    let pg = backward_recurrence(params, &traj, &dh)?;
    let norms = (0..n)
        .rev()
        .map(|t| libm::sqrt(pg.state.row(t).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()))
        .collect();
    Ok(NormProfile {
        kind: params.kind(),
        d,
        n,
        seed,
        norms,
    })
}
