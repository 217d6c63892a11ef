//! Self-checks behind the `gradcheck`, `decompose-check` and `gradnorms`
//! subcommands.

use lrn_core::analysis::{gradient_norm_profile, NormProfile};
use lrn_core::cells::{backward_sequence, forward_sequence};
use lrn_core::decomposition::max_expansion_error;
use lrn_core::{Activation, CellKind, CellParams, Matrix, Rng};
use serde::Serialize;

use crate::error::Result;

pub const FD_DELTA: f64 = 1e-5;

/// Entries whose analytic and numeric gradients are both below this are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub kind: String,
    pub activation: String,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name (or `x`) and flat index of the worst entry.
    pub worst: (String, usize),
}

/// Random cell with non-zero biases and the probe loss `Σ dH ⊙ H`.
fn setup(kind: CellKind, g: Activation, d: usize, n: usize, seed: u64) -> Result<(CellParams, Matrix, Matrix)> {
    let mut rng = Rng::new(seed);
    let mut p = CellParams::new(kind, g, d, d, &mut rng)?;
    for (name, m) in p.weights.entries_mut() {
        if name.starts_with('b') {
            *m = Matrix::uniform(1, d, -0.5, 0.5, &mut rng);
        }
    }
    let x = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
    let dh = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
    Ok((p, x, dh))
}

fn probe_loss(p: &CellParams, x: &Matrix, dh: &Matrix) -> Result<f64> {
    let h = forward_sequence(p, x, None)?.hidden_matrix();
    Ok(h.data().iter().zip(dh.data()).map(|(a, b)| a * b).sum())
}

/// Central finite differences over every parameter, bias and input entry.
pub fn gradcheck(kind: CellKind, g: Activation, d: usize, n: usize, seed: u64) -> Result<GradCheckReport> {
    let (p, x, dh) = setup(kind, g, d, n, seed)?;
    let grads = backward_sequence(&p, &forward_sequence(&p, &x, None)?, &dh)?;
    let mut report = GradCheckReport {
        kind: kind.to_string(),
        activation: g.to_string(),
        d,
        n,
        seed,
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    let mut record = |name: &str, idx: usize, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (name.to_string(), idx);
        }
    };
    let names: Vec<&'static str> = p.weights.entries().map(|(n, _)| n).collect();
    for name in names {
        let len = p.weights.get(name).expect("listed").data().len();
        for idx in 0..len {
            let shifted = |delta: f64| {
                let mut q = p.clone();
                let m = q.weights.entries_mut().find(|(n, _)| *n == name).expect("listed").1;
                m.data_mut()[idx] += delta;
                probe_loss(&q, &x, &dh)
            };
            let numeric = (shifted(FD_DELTA)? - shifted(-FD_DELTA)?) / (2.0 * FD_DELTA);
            record(name, idx, grads.weights.get(name).expect("same layout").data()[idx], numeric);
        }
    }
    for idx in 0..x.data().len() {
        let shifted = |delta: f64| {
            let mut y = x.clone();
            y.data_mut()[idx] += delta;
            probe_loss(&p, &y, &dh)
        };
        let numeric = (shifted(FD_DELTA)? - shifted(-FD_DELTA)?) / (2.0 * FD_DELTA);
        record("x", idx, grads.dx.data()[idx], numeric);
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecomposeReport {
    pub kind: String,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub max_abs_error: f64,
}

/// Identity-activation cell from `h_0 = 0`: largest gap between the
/// expanded and the recurrent hidden states.
pub fn decompose_check(kind: CellKind, d: usize, n: usize, seed: u64) -> Result<DecomposeReport> {
    let mut rng = Rng::new(seed);
    let p = CellParams::<f64>::new(kind, Activation::Identity, d, d, &mut rng)?;
    let x = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
    let traj = forward_sequence(&p, &x, None)?;
    Ok(DecomposeReport {
        kind: kind.to_string(),
        d,
        n,
        seed,
        max_abs_error: max_expansion_error(&traj)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradNormsReport {
    pub kind: String,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub norms: Vec<f64>,
}

impl From<NormProfile> for GradNormsReport {
    fn from(p: NormProfile) -> Self {
        Self {
            kind: p.kind.to_string(),
            d: p.d,
            n: p.n,
            seed: p.seed,
            norms: p.norms,
        }
    }
}

/// Recurrent-weight setting for the Elman cell in a norm profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElmanRecurrence {
    /// Weights as initialised.
    Initialised,
    /// `U = scale · Q` with `Q` a random orthogonal matrix.
    ScaledOrthogonal(f64),
}

/// Random orthogonal matrix: Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

/// Norm profile of a randomly initialised cell over uniform `[-1, 1)`
/// inputs, upstream gradient drawn uniformly on the last step.
pub fn gradnorms(kind: CellKind, g: Activation, d: usize, n: usize, seed: u64, elman: ElmanRecurrence) -> Result<GradNormsReport> {
    let mut rng = Rng::new(seed);
    let mut p = CellParams::new(kind, g, d, d, &mut rng)?;
    if let (CellKind::Elman, ElmanRecurrence::ScaledOrthogonal(s)) = (kind, elman) {
        p.weights.u = Some(random_orthogonal(d, &mut rng).scale(s));
    }
    let x = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
    let dh: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Ok(gradient_norm_profile(&p, &x, &dh, seed)?.into())
}
