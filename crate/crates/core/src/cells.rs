//! The recurrent cell family and its exact backward pass.
//!
//! Gated cells (LRN, oLRN, gLRN, eLRN) split into two phases: an input-only
//! affine precompute ([`precompute_projections`]) and an elementwise loop over
//! time. The Elman baseline hoists `x·W + b` the same way but keeps the
//! recurrent product `h·U` inside the loop.
//!
//! Row-vector convention throughout: `q_t = x_t · W_q + b_q` with `W_q` of
//! shape `d_in × d`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_acc, sigmoid, vecmat_acc, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Lrn,
    Olrn,
    Glrn,
    Elrn,
    Elman,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [Self::Lrn, Self::Olrn, Self::Glrn, Self::Elrn, Self::Elman];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lrn => "lrn",
            Self::Olrn => "olrn",
            Self::Glrn => "glrn",
            Self::Elrn => "elrn",
            Self::Elman => "elman",
        }
    }

    /// Gate-based cells: everything except Elman.
    pub fn is_gated(self) -> bool {
        self != Self::Elman
    }

    /// Activations the cell can be built with. oLRN has no outer activation
    /// and is recorded as `identity`.
    pub fn activations(self) -> &'static [Activation] {
        match self {
            Self::Olrn => &[Activation::Identity],
            _ => &[Activation::Tanh, Activation::Identity],
        }
    }

    pub fn default_activation(self) -> Activation {
        self.activations()[0]
    }

    pub fn has_query(self) -> bool {
        matches!(self, Self::Lrn | Self::Olrn | Self::Glrn)
    }

    pub fn has_key(self) -> bool {
        matches!(self, Self::Lrn | Self::Olrn)
    }

    pub fn has_output_gate(self) -> bool {
        self == Self::Olrn
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "cell kind",
                value: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// `g'(u)` expressed through `g(u)`.
    #[inline]
    pub fn derivative_from_value<T: Real>(self, y: T) -> T {
        match self {
            Self::Tanh => T::one() - y * y,
            Self::Identity => T::one(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            _ => Err(Error::Unknown {
                what: "activation",
                value: s.to_string(),
            }),
        }
    }
}

/// Weight slots of every cell kind. A slot is `None` when the kind does not
/// have that parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct CellWeights<T = f64> {
    pub w_q: Option<Matrix<T>>,
    pub b_q: Option<Matrix<T>>,
    pub w_k: Option<Matrix<T>>,
    pub b_k: Option<Matrix<T>>,
    pub w_v: Option<Matrix<T>>,
    pub b_v: Option<Matrix<T>>,
    pub w_o: Option<Matrix<T>>,
    pub b_o: Option<Matrix<T>>,
    /// Elman input weights.
    pub w: Option<Matrix<T>>,
    /// Elman recurrent weights.
    pub u: Option<Matrix<T>>,
    /// Elman bias.
    pub b: Option<Matrix<T>>,
}

/// Slot names in serialisation order.
pub const WEIGHT_NAMES: [&str; 11] = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "w", "u", "b"];

impl<T: Real> CellWeights<T> {
    fn empty() -> Self {
        Self {
            w_q: None,
            b_q: None,
            w_k: None,
            b_k: None,
            w_v: None,
            b_v: None,
            w_o: None,
            b_o: None,
            w: None,
            u: None,
            b: None,
        }
    }

    fn slots(&self) -> [&Option<Matrix<T>>; 11] {
        [
            &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o, &self.w, &self.u, &self.b,
        ]
    }

    fn slots_mut(&mut self) -> [&mut Option<Matrix<T>>; 11] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.w,
            &mut self.u,
            &mut self.b,
        ]
    }

    /// Present parameters with their names, in [`WEIGHT_NAMES`] order.
    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &Matrix<T>)> {
        WEIGHT_NAMES.into_iter().zip(self.slots()).filter_map(|(n, m)| m.as_ref().map(|m| (n, m)))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Matrix<T>)> {
        WEIGHT_NAMES.into_iter().zip(self.slots_mut()).filter_map(|(n, m)| m.as_mut().map(|m| (n, m)))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.entries().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::empty();
        for (dst, src) in out.slots_mut().into_iter().zip(self.slots()) {
            *dst = src.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> CellWeights<U> {
        let mut out = CellWeights::<U>::empty();
        for (dst, src) in out.slots_mut().into_iter().zip(self.slots()) {
            *dst = src.as_ref().map(|m| m.cast());
        }
        out
    }
}

/// Expected `(rows, cols)` of every slot for a kind, `None` when absent.
fn layout(kind: CellKind, d_in: usize, d: usize) -> [Option<(usize, usize)>; 11] {
    let w = Some((d_in, d));
    let b = Some((1, d));
    let q = kind.has_query();
    let k = kind.has_key();
    let o = kind.has_output_gate();
    let gated = kind.is_gated();
    let elman = !gated;
    let pick = |cond: bool, s: Option<(usize, usize)>| if cond { s } else { None };
    [
        pick(q, w),
        pick(q, b),
        pick(k, w),
        pick(k, b),
        pick(gated, w),
        pick(gated, b),
        pick(o, w),
        pick(o, b),
        pick(elman, w),
        pick(elman, Some((d, d))),
        pick(elman, b),
    ]
}

/// Parameters of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T = f64> {
    kind: CellKind,
    activation: Activation,
    d_in: usize,
    d: usize,
    pub weights: CellWeights<T>,
}

impl<T: Real> CellParams<T> {
    /// Glorot-uniform weights and zero biases.
    pub fn new(kind: CellKind, activation: Activation, d_in: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if d_in == 0 || d == 0 {
            return Err(Error::InvalidArgument("cell dimensions must be >= 1".to_string()));
        }
        let mut weights = CellWeights::empty();
        for (slot, shape) in weights.slots_mut().into_iter().zip(layout(kind, d_in, d)) {
            *slot = shape.map(|(r, c)| if r == 1 { Matrix::zeros(r, c) } else { Matrix::glorot_uniform(r, c, rng) });
        }
        Self::from_weights(kind, activation, d_in, d, weights)
    }

    /// Validates that exactly the slots of `kind` are present with consistent
    /// shapes.
    pub fn from_weights(kind: CellKind, activation: Activation, d_in: usize, d: usize, weights: CellWeights<T>) -> Result<Self> {
        if !kind.activations().contains(&activation) {
            return Err(Error::InvalidArgument(alloc::format!("{kind} does not support activation {activation}")));
        }
        for ((name, slot), shape) in WEIGHT_NAMES.iter().zip(weights.slots()).zip(layout(kind, d_in, d)) {
            match (slot, shape) {
                (None, None) => {}
                (Some(m), Some(s)) if m.shape() == s => {}
                (Some(m), Some(s)) => {
                    return Err(Error::Shape {
                        op: name,
                        left: m.shape(),
                        right: s,
                    })
                }
                (Some(_), None) => return Err(Error::InvalidArgument(alloc::format!("{kind} cell has no parameter {name}"))),
                (None, Some(_)) => return Err(Error::InvalidArgument(alloc::format!("{kind} cell is missing parameter {name}"))),
            }
        }
        Ok(Self {
            kind,
            activation,
            d_in,
            d,
            weights,
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cast<U: Real>(&self) -> CellParams<U> {
        CellParams {
            kind: self.kind,
            activation: self.activation,
            d_in: self.d_in,
            d: self.d,
            weights: self.weights.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.entries().map(|(_, m)| m.data().len()).sum()
    }

    fn slot<'a>(&self, m: &'a Option<Matrix<T>>) -> &'a Matrix<T> {
        m.as_ref().expect("slot presence validated at construction")
    }
}

/// Input-only projections of a whole sequence; row `t` depends on `x_t` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections<T = f64> {
    pub q: Option<Matrix<T>>,
    pub k: Option<Matrix<T>>,
    pub v: Option<Matrix<T>>,
    /// oLRN output-gate pre-activation `x·W_o + b_o`.
    pub o: Option<Matrix<T>>,
    /// Elman `x·W + b`.
    pub wx: Option<Matrix<T>>,
}

impl<T: Real> Projections<T> {
    pub fn len(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.o, &self.wx].into_iter().flatten().map(|m| m.rows()).next().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> &Matrix<T> {
        self.v.as_ref().expect("gated cell projections carry values")
    }
}

fn affine<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    x.matmul(w)?.add_row(b)
}

fn check_input<T: Real>(params: &CellParams<T>, x: &Matrix<T>) -> Result<()> {
    if x.cols() != params.d_in {
        return Err(Error::Shape {
            op: "cell input",
            left: x.shape(),
            right: (x.rows(), params.d_in),
        });
    }
    Ok(())
}

/// Computes every parameterised product of the sequence up front.
pub fn precompute_projections<T: Real>(x: &Matrix<T>, params: &CellParams<T>) -> Result<Projections<T>> {
    check_input(params, x)?;
    let w = &params.weights;
    let proj = |wm: &Option<Matrix<T>>, bm: &Option<Matrix<T>>| -> Result<Option<Matrix<T>>> {
        match (wm, bm) {
            (Some(wm), Some(bm)) => affine(x, wm, bm).map(Some),
            _ => Ok(None),
        }
    };
    Ok(Projections {
        q: proj(&w.w_q, &w.b_q)?,
        k: proj(&w.w_k, &w.b_k)?,
        v: proj(&w.w_v, &w.b_v)?,
        o: proj(&w.w_o, &w.b_o)?,
        wx: proj(&w.w, &w.b)?,
    })
}

/// Per-step record kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache<T = f64> {
    /// `i_t`; empty for Elman.
    pub input_gate: Vec<T>,
    /// `f_t`; empty for Elman.
    pub forget_gate: Vec<T>,
    /// Pre-activation: `u_t = i⊙v + f⊙h_prev` for LRN/gLRN/eLRN, the cell
    /// state `c_t` for oLRN, `x·W + h_prev·U + b` for Elman.
    pub pre: Vec<T>,
    /// `o_t`; oLRN only.
    pub output_gate: Vec<T>,
    pub hidden: Vec<T>,
}

fn check_widths<T>(slices: &[&[T]], d: usize) {
    for s in slices {
        assert_eq!(s.len(), d, "step input width {} differs from hidden size {d}", s.len());
    }
}

/// `i = σ(k + h_prev)`, `f = σ(q − h_prev)`, `h = g(i⊙v + f⊙h_prev)`.
pub fn lrn_step<T: Real>(q: &[T], k: &[T], v: &[T], h_prev: &[T], g: Activation) -> StepCache<T> {
    let d = h_prev.len();
    check_widths(&[q, k, v], d);
    let mut i = Vec::with_capacity(d);
    let mut f = Vec::with_capacity(d);
    let mut u = Vec::with_capacity(d);
    let mut h = Vec::with_capacity(d);
    for j in 0..d {
        let ij = sigmoid(k[j] + h_prev[j]);
        let fj = sigmoid(q[j] - h_prev[j]);
        let uj = ij * v[j] + fj * h_prev[j];
        i.push(ij);
        f.push(fj);
        u.push(uj);
        h.push(g.apply(uj));
    }
    StepCache {
        input_gate: i,
        forget_gate: f,
        pre: u,
        output_gate: Vec::new(),
        hidden: h,
    }
}

/// LRN gates, then `c = i⊙v + f⊙h_prev`, `o = σ(o_pre − c)`, `h = o⊙c`.
/// No outer activation is applied.
pub fn olrn_step<T: Real>(q: &[T], k: &[T], v: &[T], o_pre: &[T], h_prev: &[T]) -> StepCache<T> {
    let d = h_prev.len();
    check_widths(&[q, k, v, o_pre], d);
    let mut cache = lrn_step(q, k, v, h_prev, Activation::Identity);
    let mut o = Vec::with_capacity(d);
    for j in 0..d {
        let c = cache.pre[j];
        let oj = sigmoid(o_pre[j] - c);
        o.push(oj);
        cache.hidden[j] = oj * c;
    }
    cache.output_gate = o;
    cache
}

/// `f = σ(q − h_prev)`, `i = 1 − f`, `h = g(i⊙v + f⊙h_prev)`.
pub fn glrn_step<T: Real>(q: &[T], v: &[T], h_prev: &[T], g: Activation) -> StepCache<T> {
    let d = h_prev.len();
    check_widths(&[q, v], d);
    complementary_step(|j| q[j] - h_prev[j], v, h_prev, g)
}

/// `f = σ(−h_prev)`, `i = 1 − f`, `h = g(i⊙v + f⊙h_prev)`.
pub fn elrn_step<T: Real>(v: &[T], h_prev: &[T], g: Activation) -> StepCache<T> {
    check_widths(&[v], h_prev.len());
    complementary_step(|j| -h_prev[j], v, h_prev, g)
}

fn complementary_step<T: Real>(forget_arg: impl Fn(usize) -> T, v: &[T], h_prev: &[T], g: Activation) -> StepCache<T> {
    let d = h_prev.len();
    let mut i = Vec::with_capacity(d);
    let mut f = Vec::with_capacity(d);
    let mut u = Vec::with_capacity(d);
    let mut h = Vec::with_capacity(d);
    for j in 0..d {
        let fj = sigmoid(forget_arg(j));
        let ij = T::one() - fj;
        let uj = ij * v[j] + fj * h_prev[j];
        i.push(ij);
        f.push(fj);
        u.push(uj);
        h.push(g.apply(uj));
    }
    StepCache {
        input_gate: i,
        forget_gate: f,
        pre: u,
        output_gate: Vec::new(),
        hidden: h,
    }
}

/// Elman step from an already projected input `wx_t = x_t·W + b`:
/// `h = g(wx_t + h_prev·U)`.
pub fn elman_step_projected<T: Real>(wx_t: &[T], h_prev: &[T], u: &Matrix<T>, g: Activation) -> StepCache<T> {
    let d = h_prev.len();
    check_widths(&[wx_t], d);
    let mut rec = vec![T::zero(); d];
    vecmat_acc(h_prev, u.data(), &mut rec);
    let pre: Vec<T> = wx_t.iter().zip(&rec).map(|(&a, &r)| a + r).collect();
    let hidden = pre.iter().map(|&a| g.apply(a)).collect();
    StepCache {
        input_gate: Vec::new(),
        forget_gate: Vec::new(),
        pre,
        output_gate: Vec::new(),
        hidden,
    }
}

/// `h_t = g(x_t·W + h_prev·U + b)` with both products done here.
pub fn elman_step<T: Real>(x_t: &[T], h_prev: &[T], params: &CellParams<T>) -> Result<StepCache<T>> {
    if params.kind != CellKind::Elman {
        return Err(Error::WrongCellKind {
            expected: "an elman",
            found: params.kind,
        });
    }
    if x_t.len() != params.d_in || h_prev.len() != params.d {
        return Err(Error::Shape {
            op: "elman_step",
            left: (x_t.len(), h_prev.len()),
            right: (params.d_in, params.d),
        });
    }
    let w = &params.weights;
    let wx = row_affine(x_t, params.slot(&w.w), params.slot(&w.b));
    Ok(elman_step_projected(&wx, h_prev, params.slot(&w.u), params.activation))
}

/// `x·W + b` for one row, using the same accumulation as the batched product.
fn row_affine<T: Real>(x: &[T], w: &Matrix<T>, b: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols()];
    vecmat_acc(x, w.data(), &mut out);
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o = *o + bv;
    }
    out
}

/// Everything the backward pass needs: inputs, projections and per-step
/// caches.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T = f64> {
    pub kind: CellKind,
    pub activation: Activation,
    pub input: Matrix<T>,
    pub h0: Vec<T>,
    pub projections: Projections<T>,
    pub steps: Vec<StepCache<T>>,
}

/// Borrowed view of one step with its neighbours, 0-based `t`.
#[derive(Clone, Copy, Debug)]
pub struct StepView<'a, T> {
    pub cache: &'a StepCache<T>,
    pub h_prev: &'a [T],
    /// `v_t`; empty for Elman.
    pub v: &'a [T],
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn d(&self) -> usize {
        self.h0.len()
    }

    /// `h_{t-1}` for the 0-based step `t`.
    pub fn h_prev(&self, t: usize) -> &[T] {
        if t == 0 {
            &self.h0
        } else {
            &self.steps[t - 1].hidden
        }
    }

    pub fn final_hidden(&self) -> &[T] {
        self.steps.last().map_or(&self.h0, |s| &s.hidden)
    }

    pub fn step_view(&self, t: usize) -> StepView<'_, T> {
        StepView {
            cache: &self.steps[t],
            h_prev: self.h_prev(t),
            v: self.projections.v.as_ref().map_or(&[][..], |v| v.row(t)),
        }
    }

    /// All hidden states as an n×d matrix.
    pub fn hidden_matrix(&self) -> Matrix<T> {
        let d = self.d();
        let mut data = Vec::with_capacity(self.len() * d);
        for s in &self.steps {
            data.extend_from_slice(&s.hidden);
        }
        Matrix::new(self.len(), d, data).expect("steps have width d")
    }
}

fn initial_state<T: Real>(params: &CellParams<T>, h0: Option<&[T]>) -> Result<Vec<T>> {
    match h0 {
        None => Ok(vec![T::zero(); params.d]),
        Some(h) if h.len() == params.d => Ok(h.to_vec()),
        Some(h) => Err(Error::Shape {
            op: "initial state",
            left: (1, h.len()),
            right: (1, params.d),
        }),
    }
}

fn run_step<T: Real>(kind: CellKind, g: Activation, p: &Projections<T>, u: Option<&Matrix<T>>, t: usize, h_prev: &[T]) -> StepCache<T> {
    fn row<T: Real>(m: &Option<Matrix<T>>, t: usize) -> &[T] {
        m.as_ref().expect("projection present for kind").row(t)
    }
    match kind {
        CellKind::Lrn => lrn_step(row(&p.q, t), row(&p.k, t), row(&p.v, t), h_prev, g),
        CellKind::Olrn => olrn_step(row(&p.q, t), row(&p.k, t), row(&p.v, t), row(&p.o, t), h_prev),
        CellKind::Glrn => glrn_step(row(&p.q, t), row(&p.v, t), h_prev, g),
        CellKind::Elrn => elrn_step(row(&p.v, t), h_prev, g),
        CellKind::Elman => elman_step_projected(row(&p.wx, t), h_prev, u.expect("elman has U"), g),
    }
}

/// Runs the cell over `x` (n×d_in): projections once, then the step n times.
/// `h0` defaults to zeros.
pub fn forward_sequence<T: Real>(params: &CellParams<T>, x: &Matrix<T>, h0: Option<&[T]>) -> Result<Trajectory<T>> {
    let h0 = initial_state(params, h0)?;
    let projections = precompute_projections(x, params)?;
    let mut steps: Vec<StepCache<T>> = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let h_prev = steps.last().map_or(&h0[..], |s| &s.hidden[..]);
        let step = run_step(params.kind, params.activation, &projections, params.weights.u.as_ref(), t, h_prev);
        steps.push(step);
    }
    Ok(Trajectory {
        kind: params.kind,
        activation: params.activation,
        input: x.clone(),
        h0,
        projections,
        steps,
    })
}

/// Reference forward pass that multiplies every weight matrix inside the
/// loop, one row at a time. Produces the same trajectory as
/// [`forward_sequence`].
pub fn forward_unfused<T: Real>(params: &CellParams<T>, x: &Matrix<T>, h0: Option<&[T]>) -> Result<Trajectory<T>> {
    check_input(params, x)?;
    let h0 = initial_state(params, h0)?;
    let n = x.rows();
    let d = params.d;
    let w = &params.weights;
    let mut rows: [Vec<T>; 5] = Default::default();
    let mut steps: Vec<StepCache<T>> = Vec::with_capacity(n);
    for t in 0..n {
        let x_t = x.row(t);
        let project = |wm: &Option<Matrix<T>>, bm: &Option<Matrix<T>>| match (wm, bm) {
            (Some(wm), Some(bm)) => Some(row_affine(x_t, wm, bm)),
            _ => None,
        };
        let q = project(&w.w_q, &w.b_q);
        let k = project(&w.w_k, &w.b_k);
        let v = project(&w.w_v, &w.b_v);
        let o = project(&w.w_o, &w.b_o);
        let wx = project(&w.w, &w.b);
        let h_prev = steps.last().map_or(&h0[..], |s| &s.hidden[..]);
        let step = match params.kind {
            CellKind::Lrn => lrn_step(q.as_ref().unwrap(), k.as_ref().unwrap(), v.as_ref().unwrap(), h_prev, params.activation),
            CellKind::Olrn => olrn_step(q.as_ref().unwrap(), k.as_ref().unwrap(), v.as_ref().unwrap(), o.as_ref().unwrap(), h_prev),
            CellKind::Glrn => glrn_step(q.as_ref().unwrap(), v.as_ref().unwrap(), h_prev, params.activation),
            CellKind::Elrn => elrn_step(v.as_ref().unwrap(), h_prev, params.activation),
            CellKind::Elman => elman_step_projected(wx.as_ref().unwrap(), h_prev, params.slot(&w.u), params.activation),
        };
        steps.push(step);
        for (store, row) in rows.iter_mut().zip([q, k, v, o, wx]) {
            if let Some(row) = row {
                store.extend_from_slice(&row);
            }
        }
    }
    let [q, k, v, o, wx] = rows;
    let to_matrix = |data: Vec<T>, present: bool| present.then(|| Matrix::new(n, d, data).expect("rows have width d"));
    let projections = Projections {
        q: to_matrix(q, w.w_q.is_some()),
        k: to_matrix(k, w.w_k.is_some()),
        v: to_matrix(v, w.w_v.is_some()),
        o: to_matrix(o, w.w_o.is_some()),
        wx: to_matrix(wx, w.w.is_some()),
    };
    Ok(Trajectory {
        kind: params.kind,
        activation: params.activation,
        input: x.clone(),
        h0,
        projections,
        steps,
    })
}

/// Gradients for every parameter slot plus the input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T = f64> {
    pub weights: CellWeights<T>,
    pub dx: Matrix<T>,
}

impl<T: Real> GradientSet<T> {
    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.weights.entries().all(|(_, m)| m.is_finite())
    }
}

/// Output of the in-loop half of backpropagation: gradients with respect to
/// the projections and to every hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionGrads<T = f64> {
    pub q: Option<Matrix<T>>,
    pub k: Option<Matrix<T>>,
    pub v: Option<Matrix<T>>,
    pub o: Option<Matrix<T>>,
    /// Elman: gradient of the pre-activation `x·W + h_prev·U + b`.
    pub pre: Option<Matrix<T>>,
    /// Total `∂L/∂h_t` (direct plus recurrent), row per step.
    pub state: Matrix<T>,
    /// `∂L/∂h_0`.
    pub h0: Vec<T>,
}

fn check_trajectory<T: Real>(params: &CellParams<T>, traj: &Trajectory<T>, dh: &Matrix<T>) -> Result<()> {
    if traj.kind != params.kind {
        return Err(Error::WrongCellKind {
            expected: params.kind.name(),
            found: traj.kind,
        });
    }
    if traj.activation != params.activation || traj.d() != params.d || traj.input.cols() != params.d_in {
        return Err(Error::InvalidArgument("trajectory was not produced by these parameters".to_string()));
    }
    if dh.shape() != (traj.len(), params.d) {
        return Err(Error::Shape {
            op: "backward upstream gradient",
            left: dh.shape(),
            right: (traj.len(), params.d),
        });
    }
    Ok(())
}

/// Reverse pass through the recurrence only. Everything here is elementwise
/// for the gated cells; Elman additionally multiplies by `Uᵀ` each step.
///
/// The hidden-to-hidden path of the LRN family is diagonal: with
/// `g' = g'(u_t)`, LRN contributes
/// `(i(1−i)⊙v − h_prev⊙f(1−f) + f) ⊙ g'`.
pub fn backward_recurrence<T: Real>(params: &CellParams<T>, traj: &Trajectory<T>, dh: &Matrix<T>) -> Result<ProjectionGrads<T>> {
    check_trajectory(params, traj, dh)?;
    let n = traj.len();
    let d = params.d;
    let kind = params.kind;
    let g = params.activation;
    let alloc_if = |present: bool| present.then(|| Matrix::zeros(n, d));
    let mut gq = alloc_if(kind.has_query());
    let mut gk = alloc_if(kind.has_key());
    let mut gv = alloc_if(kind.is_gated());
    let mut go = alloc_if(kind.has_output_gate());
    let mut gpre = alloc_if(!kind.is_gated());
    let mut state = Matrix::zeros(n, d);
    let mut carry = vec![T::zero(); d];
    let mut gh = vec![T::zero(); d];
    let mut du = vec![T::zero(); d];
    let one = T::one();

    for t in (0..n).rev() {
        let step = &traj.steps[t];
        let h_prev = traj.h_prev(t);
        for j in 0..d {
            gh[j] = dh.get(t, j) + carry[j];
        }
        state.row_mut(t).copy_from_slice(&gh);

        if kind == CellKind::Elman {
            let da = gpre.as_mut().unwrap().row_mut(t);
            for j in 0..d {
                da[j] = gh[j] * g.derivative_from_value(step.hidden[j]);
            }
            // carry_i = Σ_j U[i][j] · da_j
            let u = params.slot(&params.weights.u);
            for (i, c) in carry.iter_mut().enumerate() {
                *c = u.row(i).iter().zip(da.iter()).fold(T::zero(), |acc, (&uij, &dj)| acc + uij * dj);
            }
            continue;
        }

        // gradient w.r.t. u_t (or c_t for oLRN)
        if kind == CellKind::Olrn {
            let o = &step.output_gate;
            let c = &step.pre;
            let go_row = go.as_mut().unwrap().row_mut(t);
            for j in 0..d {
                let dpre_o = gh[j] * c[j] * o[j] * (one - o[j]);
                go_row[j] = dpre_o;
                du[j] = gh[j] * o[j] - dpre_o;
            }
        } else {
            for j in 0..d {
                du[j] = gh[j] * g.derivative_from_value(step.hidden[j]);
            }
        }

        let i = &step.input_gate;
        let f = &step.forget_gate;
        let v = traj.projections.value().row(t);
        gv.as_mut().unwrap().row_mut(t).iter_mut().zip(&du).zip(i).for_each(|((o, &d_), &ij)| *o = d_ * ij);
        for j in 0..d {
            let di = du[j] * v[j];
            let df = du[j] * h_prev[j];
            let mut dhp = du[j] * f[j];
            let sf = f[j] * (one - f[j]);
            match kind {
                CellKind::Lrn | CellKind::Olrn => {
                    let dk = di * i[j] * (one - i[j]);
                    let dq = df * sf;
                    gk.as_mut().unwrap().row_mut(t)[j] = dk;
                    gq.as_mut().unwrap().row_mut(t)[j] = dq;
                    dhp = dhp + dk - dq;
                }
                CellKind::Glrn => {
                    let dq = (df - di) * sf;
                    gq.as_mut().unwrap().row_mut(t)[j] = dq;
                    dhp = dhp - dq;
                }
                CellKind::Elrn => {
                    dhp = dhp - (df - di) * sf;
                }
                CellKind::Elman => unreachable!(),
            }
            carry[j] = dhp;
        }
    }

    Ok(ProjectionGrads {
        q: gq,
        k: gk,
        v: gv,
        o: go,
        pre: gpre,
        state,
        h0: carry,
    })
}

/// `Aᵀ·B` without materialising the transpose: `out[k×n] = Σ_t a[t]ᵀ b[t]`,
/// accumulated over `t` in order.
fn transpose_matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let at = a.transpose();
    let mut out = Matrix::zeros(a.cols(), b.cols());
    gemm_acc(at.data(), b.data(), out.data_mut(), a.cols(), a.rows(), b.cols());
    out
}

/// The hoisted half of backpropagation: turns projection gradients into
/// parameter and input gradients with batched products.
pub fn parameter_grads<T: Real>(params: &CellParams<T>, traj: &Trajectory<T>, pg: &ProjectionGrads<T>) -> Result<GradientSet<T>> {
    let x = &traj.input;
    let n = traj.len();
    let mut weights = params.weights.zeros_like();
    let mut dx = Matrix::zeros(n, params.d_in);
    let w = &params.weights;
    let mut accumulate = |dp: &Option<Matrix<T>>, wm: &Option<Matrix<T>>, gw: &mut Option<Matrix<T>>, gb: &mut Option<Matrix<T>>| -> Result<()> {
        if let (Some(dp), Some(wm)) = (dp, wm) {
            *gw = Some(transpose_matmul(x, dp));
            *gb = Some(dp.column_sums());
            let back = dp.matmul(&wm.transpose())?;
            dx.add_scaled(&back, T::one())?;
        }
        Ok(())
    };
    accumulate(&pg.q, &w.w_q, &mut weights.w_q, &mut weights.b_q)?;
    accumulate(&pg.k, &w.w_k, &mut weights.w_k, &mut weights.b_k)?;
    accumulate(&pg.v, &w.w_v, &mut weights.w_v, &mut weights.b_v)?;
    accumulate(&pg.o, &w.w_o, &mut weights.w_o, &mut weights.b_o)?;
    accumulate(&pg.pre, &w.w, &mut weights.w, &mut weights.b)?;
    if let Some(da) = &pg.pre {
        let d = params.d;
        let mut h_prev = Matrix::zeros(n, d);
        for t in 0..n {
            h_prev.row_mut(t).copy_from_slice(traj.h_prev(t));
        }
        weights.u = Some(transpose_matmul(&h_prev, da));
    }
    Ok(GradientSet { weights, dx })
}

/// Exact gradients of `L = Σ_t dH[t] · h_t` with respect to all parameters
/// and the input sequence.
pub fn backward_sequence<T: Real>(params: &CellParams<T>, traj: &Trajectory<T>, dh: &Matrix<T>) -> Result<GradientSet<T>> {
    let pg = backward_recurrence(params, traj, dh)?;
    parameter_grads(params, traj, &pg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(kind: CellKind, g: Activation, d_in: usize, d: usize, seed: u64) -> CellParams {
        let mut rng = Rng::new(seed);
        let mut p = CellParams::new(kind, g, d_in, d, &mut rng).unwrap();
        // non-zero biases so they are exercised
        for (name, m) in p.weights.entries_mut() {
            if name.starts_with('b') {
                *m = Matrix::uniform(1, d, -0.3, 0.3, &mut rng);
            }
        }
        p
    }

    #[test]
    fn kinds_parse_and_layout() {
        for kind in CellKind::ALL {
            assert_eq!(kind.name().parse::<CellKind>().unwrap(), kind);
        }
        assert!("lstm".parse::<CellKind>().is_err());
        let mut rng = Rng::new(1);
        let glrn: CellParams = CellParams::new(CellKind::Glrn, Activation::Tanh, 3, 4, &mut rng).unwrap();
        assert!(glrn.weights.w_k.is_none() && glrn.weights.w_q.is_some());
        let elrn: CellParams = CellParams::new(CellKind::Elrn, Activation::Tanh, 3, 4, &mut rng).unwrap();
        assert!(elrn.weights.w_k.is_none() && elrn.weights.w_q.is_none());
        let olrn: CellParams = CellParams::new(CellKind::Olrn, Activation::Identity, 3, 4, &mut rng).unwrap();
        assert!(olrn.weights.w_o.is_some());
        let elman: CellParams = CellParams::new(CellKind::Elman, Activation::Tanh, 3, 4, &mut rng).unwrap();
        assert_eq!(elman.weights.entries().map(|(n, _)| n).collect::<Vec<_>>(), ["w", "u", "b"]);
        assert_eq!(elman.weights.u.as_ref().unwrap().shape(), (4, 4));
        assert!(CellParams::<f64>::new(CellKind::Olrn, Activation::Tanh, 3, 4, &mut rng).is_err());
        // biases start at zero
        assert!(glrn.weights.b_q.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn from_weights_rejects_extra_or_missing_slots() {
        let mut rng = Rng::new(2);
        let p: CellParams = CellParams::new(CellKind::Lrn, Activation::Tanh, 2, 3, &mut rng).unwrap();
        let mut extra = p.weights.clone();
        extra.w_o = Some(Matrix::zeros(2, 3));
        assert!(CellParams::from_weights(CellKind::Lrn, Activation::Tanh, 2, 3, extra).is_err());
        let mut missing = p.weights.clone();
        missing.b_k = None;
        assert!(CellParams::from_weights(CellKind::Lrn, Activation::Tanh, 2, 3, missing).is_err());
        let mut wrong = p.weights;
        wrong.w_v = Some(Matrix::zeros(3, 3));
        assert!(matches!(
            CellParams::from_weights(CellKind::Lrn, Activation::Tanh, 2, 3, wrong),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identity_weights_project_to_input() {
        let d = 3;
        let eye = || Some(Matrix::<f64>::identity(d));
        let zero = || Some(Matrix::zeros(1, d));
        let weights = CellWeights {
            w_q: eye(),
            b_q: zero(),
            w_k: eye(),
            b_k: zero(),
            w_v: eye(),
            b_v: zero(),
            w_o: None,
            b_o: None,
            w: None,
            u: None,
            b: None,
        };
        let p = CellParams::from_weights(CellKind::Lrn, Activation::Tanh, d, d, weights).unwrap();
        let x = Matrix::uniform(4, d, -1.0, 1.0, &mut Rng::new(4));
        let proj = precompute_projections(&x, &p).unwrap();
        assert_eq!(proj.q.as_ref().unwrap(), &x);
        assert_eq!(proj.k.as_ref().unwrap(), &x);
        assert_eq!(proj.v.as_ref().unwrap(), &x);
    }

    #[test]
    fn zero_input_passes_biases_through() {
        let p = random_params(CellKind::Lrn, Activation::Tanh, 3, 4, 9);
        let proj = precompute_projections(&Matrix::zeros(5, 3), &p).unwrap();
        for t in 0..5 {
            assert_eq!(proj.q.as_ref().unwrap().row(t), p.weights.b_q.as_ref().unwrap().data());
            assert_eq!(proj.k.as_ref().unwrap().row(t), p.weights.b_k.as_ref().unwrap().data());
            assert_eq!(proj.v.as_ref().unwrap().row(t), p.weights.b_v.as_ref().unwrap().data());
        }
    }

    #[test]
    fn projections_match_per_row_products() {
        let p = random_params(CellKind::Olrn, Activation::Identity, 4, 4, 11);
        let x = Matrix::uniform(3, 4, -1.0, 1.0, &mut Rng::new(11));
        let proj = precompute_projections(&x, &p).unwrap();
        for t in 0..3 {
            let row = x.row_matrix(t).unwrap();
            let w = &p.weights;
            let q = row.matmul(w.w_q.as_ref().unwrap()).unwrap().add(w.b_q.as_ref().unwrap()).unwrap();
            let o = row.matmul(w.w_o.as_ref().unwrap()).unwrap().add(w.b_o.as_ref().unwrap()).unwrap();
            assert_eq!(q.data(), proj.q.as_ref().unwrap().row(t));
            assert_eq!(o.data(), proj.o.as_ref().unwrap().row(t));
        }
        assert!(precompute_projections(&Matrix::zeros(3, 5), &p).is_err());
    }

    #[test]
    fn lrn_step_examples() {
        let z = [0.0; 3];
        let one = [1.0; 3];
        let s = lrn_step(&z, &z, &one, &z, Activation::Identity);
        assert_eq!(s.input_gate, [0.5; 3]);
        assert_eq!(s.forget_gate, [0.5; 3]);
        assert_eq!(s.hidden, [0.5; 3]);
        let s = lrn_step(&z, &z, &one, &z, Activation::Tanh);
        for h in s.hidden {
            assert!((h - libm::tanh(0.5)).abs() < 1e-15);
        }
        for g in [Activation::Tanh, Activation::Identity] {
            let s = lrn_step(&[0.3, -0.2, 1.0], &[0.1, 0.4, -2.0], &z, &z, g);
            assert_eq!(s.hidden, [0.0; 3]);
        }
    }

    #[test]
    fn olrn_step_examples() {
        let z = [0.0; 2];
        let s = olrn_step(&[0.4, -0.1], &[0.2, 0.3], &z, &z, &z);
        assert_eq!(s.pre, [0.0; 2]);
        assert_eq!(s.output_gate, [0.5; 2]);
        assert_eq!(s.hidden, [0.0; 2]);

        let s = olrn_step(&z, &z, &[1.0; 2], &z, &z);
        let o = 1.0 / (1.0 + libm::exp(0.5));
        for j in 0..2 {
            assert_eq!(s.pre[j], 0.5);
            assert!((s.output_gate[j] - o).abs() < 1e-15);
            assert!((s.hidden[j] - 0.5 * o).abs() < 1e-15);
        }
        // saturated output gate passes the cell state through
        let s = olrn_step::<f64>(&[0.3; 2], &[0.1; 2], &[0.7; 2], &[60.0; 2], &[0.2; 2]);
        for j in 0..2 {
            assert!((s.hidden[j] - s.pre[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn complementary_steps() {
        let s = glrn_step(&[0.0], &[1.0], &[0.0], Activation::Identity);
        assert_eq!((s.forget_gate[0], s.input_gate[0], s.hidden[0]), (0.5, 0.5, 0.5));
        let s = elrn_step(&[0.3, -0.4], &[0.0, 0.0], Activation::Tanh);
        assert_eq!(s.forget_gate, [0.5, 0.5]);
        assert_eq!(s.input_gate, [0.5, 0.5]);
        // saturation: large h_prev closes the forget gate
        let s = elrn_step::<f64>(&[0.3], &[50.0], Activation::Identity);
        assert!(s.forget_gate[0] < 1e-20);
        assert!((s.hidden[0] - 0.3).abs() < 1e-12);
    }

    /// Scalar-loop oracle for the complementary cells.
    fn scalar_complementary(q: Option<&[f64]>, v: &[f64], h_prev: &[f64], g: Activation) -> Vec<f64> {
        (0..v.len())
            .map(|j| {
                let arg = q.map_or(0.0, |q| q[j]) - h_prev[j];
                let f = 1.0 / (1.0 + libm::exp(-arg));
                let u = (1.0 - f) * v[j] + f * h_prev[j];
                match g {
                    Activation::Tanh => libm::tanh(u),
                    Activation::Identity => u,
                }
            })
            .collect()
    }

    #[test]
    fn complementary_steps_match_scalar_oracle() {
        let mut rng = Rng::new(5);
        let mut draw = || (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<f64>>();
        let (q, v, h) = (draw(), draw(), draw());
        for g in [Activation::Tanh, Activation::Identity] {
            let s = glrn_step(&q, &v, &h, g);
            for (a, b) in s.hidden.iter().zip(scalar_complementary(Some(&q), &v, &h, g)) {
                assert!((a - b).abs() < 1e-14);
            }
            let s = elrn_step(&v, &h, g);
            for (a, b) in s.hidden.iter().zip(scalar_complementary(None, &v, &h, g)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn elman_step_examples() {
        let d = 3;
        let mut rng = Rng::new(8);
        let h_prev: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let weights = CellWeights {
            w_q: None,
            b_q: None,
            w_k: None,
            b_k: None,
            w_v: None,
            b_v: None,
            w_o: None,
            b_o: None,
            w: Some(Matrix::zeros(2, d)),
            u: Some(Matrix::identity(d)),
            b: Some(Matrix::zeros(1, d)),
        };
        let carry = CellParams::from_weights(CellKind::Elman, Activation::Identity, 2, d, weights).unwrap();
        assert_eq!(elman_step(&[0.7, -0.3], &h_prev, &carry).unwrap().hidden, h_prev);

        let p = random_params(CellKind::Elman, Activation::Tanh, d, d, 12);
        let x = [0.2, -0.5, 0.9];
        let s = elman_step(&x, &[0.0; 3], &p).unwrap();
        let (w, u, b) = (p.weights.w.as_ref().unwrap(), p.weights.u.as_ref().unwrap(), p.weights.b.as_ref().unwrap());
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += x[i] * w.get(i, j);
            }
            assert!((s.hidden[j] - libm::tanh(acc + b.get(0, j))).abs() < 1e-15);
        }
        // triple-loop oracle with a non-zero state
        let s = elman_step(&x, &h_prev, &p).unwrap();
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += x[i] * w.get(i, j);
            }
            acc += b.get(0, j);
            let mut rec = 0.0;
            for i in 0..d {
                rec += h_prev[i] * u.get(i, j);
            }
            assert!((s.hidden[j] - libm::tanh(acc + rec)).abs() < 1e-14);
        }
        let lrn = random_params(CellKind::Lrn, Activation::Tanh, d, d, 1);
        assert!(elman_step(&x, &h_prev, &lrn).is_err());
    }

    #[test]
    fn forward_sequence_edge_lengths() {
        let p = random_params(CellKind::Lrn, Activation::Tanh, 3, 4, 2);
        let h0 = [0.1, -0.2, 0.3, 0.0];
        let empty = forward_sequence(&p, &Matrix::zeros(0, 3), Some(&h0)).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.final_hidden(), &h0);

        let x = Matrix::uniform(1, 3, -1.0, 1.0, &mut Rng::new(3));
        let one = forward_sequence(&p, &x, Some(&h0)).unwrap();
        let proj = precompute_projections(&x, &p).unwrap();
        let s = lrn_step(proj.q.as_ref().unwrap().row(0), proj.k.as_ref().unwrap().row(0), proj.v.as_ref().unwrap().row(0), &h0, Activation::Tanh);
        assert_eq!(one.steps[0], s);
        assert!(forward_sequence(&p, &x, Some(&[0.0; 3])).is_err());
    }

    #[test]
    fn forward_matches_scripted_oracle() {
        let (d, n) = (8, 16);
        let p = random_params(CellKind::Lrn, Activation::Tanh, d, d, 3);
        let x = Matrix::uniform(n, d, -1.0, 1.0, &mut Rng::new(3));
        let traj = forward_sequence(&p, &x, None).unwrap();
        // step-by-step oracle that multiplies inside the loop with plain loops
        let w = &p.weights;
        let lin = |m: &Matrix, b: &Matrix, t: usize, j: usize| {
            let mut acc = 0.0;
            for i in 0..d {
                acc += x.get(t, i) * m.get(i, j);
            }
            acc + b.get(0, j)
        };
        let mut h = vec![0.0; d];
        for t in 0..n {
            let mut next = vec![0.0; d];
            for j in 0..d {
                let q = lin(w.w_q.as_ref().unwrap(), w.b_q.as_ref().unwrap(), t, j);
                let k = lin(w.w_k.as_ref().unwrap(), w.b_k.as_ref().unwrap(), t, j);
                let v = lin(w.w_v.as_ref().unwrap(), w.b_v.as_ref().unwrap(), t, j);
                let i_ = 1.0 / (1.0 + libm::exp(-(k + h[j])));
                let f_ = 1.0 / (1.0 + libm::exp(-(q - h[j])));
                next[j] = libm::tanh(i_ * v + f_ * h[j]);
            }
            h = next;
        }
        for (a, b) in traj.final_hidden().iter().zip(&h) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn fused_and_unfused_agree_for_all_kinds() {
        for kind in CellKind::ALL {
            for &g in kind.activations() {
                let p = random_params(kind, g, 5, 6, 21);
                let x = Matrix::uniform(9, 5, -1.0, 1.0, &mut Rng::new(21));
                let a = forward_sequence(&p, &x, None).unwrap();
                let b = forward_unfused(&p, &x, None).unwrap();
                assert_eq!(a, b, "{kind} {g}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for kind in CellKind::ALL {
            let p = random_params(kind, kind.default_activation(), 3, 4, 6);
            let x = Matrix::uniform(5, 3, -1.0, 1.0, &mut Rng::new(6));
            let traj = forward_sequence(&p, &x, None).unwrap();
            let grads = backward_sequence(&p, &traj, &Matrix::zeros(5, 4)).unwrap();
            assert!(grads.dx.data().iter().all(|&v| v == 0.0));
            for (_, m) in grads.weights.entries() {
                assert!(m.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn single_step_value_gradient_is_input_gate_outer_input() {
        // n = 1, identity g, dH = 1: dW_v[a][j] = x_a · i_j
        let p = random_params(CellKind::Lrn, Activation::Identity, 3, 4, 14);
        let x = Matrix::uniform(1, 3, -1.0, 1.0, &mut Rng::new(14));
        let traj = forward_sequence(&p, &x, None).unwrap();
        let grads = backward_sequence(&p, &traj, &Matrix::filled(1, 4, 1.0)).unwrap();
        let dwv = grads.weights.w_v.as_ref().unwrap();
        let i = &traj.steps[0].input_gate;
        for a in 0..3 {
            for j in 0..4 {
                assert!((dwv.get(a, j) - x.get(0, a) * i[j]).abs() < 1e-15);
            }
        }
        assert_eq!(grads.weights.b_v.as_ref().unwrap().data(), &i[..]);
    }

    #[test]
    fn backward_rejects_mismatched_inputs() {
        let p = random_params(CellKind::Lrn, Activation::Tanh, 3, 4, 1);
        let other = random_params(CellKind::Glrn, Activation::Tanh, 3, 4, 1);
        let x = Matrix::uniform(5, 3, -1.0, 1.0, &mut Rng::new(1));
        let traj = forward_sequence(&p, &x, None).unwrap();
        assert!(backward_sequence(&other, &traj, &Matrix::zeros(5, 4)).is_err());
        assert!(backward_sequence(&p, &traj, &Matrix::zeros(4, 4)).is_err());
    }
}
