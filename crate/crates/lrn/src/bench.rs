//! Recurrence micro-benchmark: hoisted ("fused") projections against
//! per-step ("naive") matrix products, with optional layer normalisation.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use lrn_core::cells::CellParams;
use lrn_core::tensor::{gemm_acc, layer_norm_backward_slice, sigmoid, vecmat_acc};
use lrn_core::{Activation, CellKind, Matrix, Real, Rng};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Fused,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// What one timed run covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    ForwardBackward,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),* }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok(Self::$variant),)*
                    _ => Err(format!("unknown {}: {s}", stringify!($ty))),
                }
            }
        }
    };
}

named_enum!(BenchMode { Fused => "fused", Naive => "naive" });
named_enum!(Precision { F32 => "f32", F64 => "f64" });
named_enum!(Pass { Forward => "forward", ForwardBackward => "forward_backward" });

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub kind: CellKind,
    pub mode: BenchMode,
    pub pass: Pass,
    pub d: usize,
    pub n: usize,
    pub batch: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
    pub layer_norm: bool,
    pub precision: Precision,
}

impl BenchConfig {
    pub fn new(kind: CellKind, mode: BenchMode) -> Self {
        Self {
            kind,
            mode,
            pass: Pass::Forward,
            d: 512,
            n: 256,
            batch: 32,
            repeats: 5,
            warmups: 2,
            seed: 0,
            layer_norm: false,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.batch == 0 {
            return Err(Error::Unsupported("bench sizes must be >= 1".into()));
        }
        if self.repeats < 5 {
            return Err(Error::Unsupported(format!("at least 5 repeats are required, got {}", self.repeats)));
        }
        if self.warmups < 2 {
            return Err(Error::Unsupported(format!("at least 2 warmups are required, got {}", self.warmups)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub available_parallelism: usize,
    pub worker_threads: usize,
    pub optimized: bool,
}

impl Environment {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            worker_threads: rayon::current_num_threads(),
            optimized: !cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub kind: String,
    pub mode: BenchMode,
    pub pass: Pass,
    pub d: usize,
    pub n: usize,
    pub batch: usize,
    pub precision: Precision,
    pub repeats: usize,
    pub warmups: usize,
    pub layer_norm: bool,
    /// Elman keeps `h·U` inside the loop in both modes.
    pub in_loop_matmul: bool,
    /// Largest fused/naive difference seen by the gate, scaled by the
    /// output magnitude.
    pub equivalence_error: f64,
    pub times_seconds: Vec<f64>,
    pub median_seconds: f64,
    /// Recurrent steps (`batch · n`) per second at the median time.
    pub steps_per_second: f64,
    pub environment: Environment,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Gate tolerance on the scaled difference.
pub fn equivalence_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F64 => 1e-12,
        Precision::F32 => 1e-5,
    }
}

struct Slot<T> {
    w: Vec<T>,
    wt: Vec<T>,
    b: Vec<T>,
}

/// Flat, row-major copy of a cell's parameters.
struct Kernel<T> {
    kind: CellKind,
    g: Activation,
    d: usize,
    layer_norm: bool,
    /// `q, k, v, o` in that order where present, or the single Elman `W`.
    slots: Vec<Slot<T>>,
    u: Vec<T>,
    ut: Vec<T>,
}

struct Lane<T> {
    x: Vec<T>,
    xt: Vec<T>,
    dh: Vec<T>,
}

/// Everything the backward pass needs from the forward pass.
struct Tape<T> {
    h: Vec<T>,
    /// Post-normalisation projections, one `n×d` buffer per slot.
    proj: Vec<Vec<T>>,
    proj_inv_std: Vec<Vec<T>>,
    i: Vec<T>,
    f: Vec<T>,
    o: Vec<T>,
    /// `u_t` (cell state for oLRN).
    pre: Vec<T>,
    /// Elman `h·U` after normalisation and its statistics.
    hu: Vec<T>,
    hu_inv_std: Vec<T>,
}

/// Gradients returned by one lane.
struct Grads<T> {
    w: Vec<Vec<T>>,
    b: Vec<Vec<T>>,
    u: Vec<T>,
    x: Vec<T>,
}

fn transpose<T: Copy>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| m[r * cols + c]));
    }
    out
}

/// Normalises `row` in place without gain or bias and returns `1/σ`.
fn normalise<T: Real>(row: &mut [T]) -> T {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    let inv_std = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    inv_std
}

impl<T: Real> Kernel<T> {
    fn new(kind: CellKind, d: usize, layer_norm: bool, rng: &mut Rng) -> Result<Self> {
        let mut params = CellParams::<f64>::new(kind, kind.default_activation(), d, d, rng)?;
        for (name, m) in params.weights.entries_mut() {
            if name.starts_with('b') {
                *m = Matrix::uniform(1, d, -0.1, 0.1, rng);
            }
        }
        let params: CellParams<T> = params.cast();
        let w = &params.weights;
        let pairs = [(&w.w_q, &w.b_q), (&w.w_k, &w.b_k), (&w.w_v, &w.b_v), (&w.w_o, &w.b_o), (&w.w, &w.b)];
        let slots = pairs
            .into_iter()
            .filter_map(|(wm, bm)| {
                let (wm, bm) = (wm.as_ref()?, bm.as_ref()?);
                Some(Slot {
                    w: wm.data().to_vec(),
                    wt: wm.transpose().into_data(),
                    b: bm.data().to_vec(),
                })
            })
            .collect();
        let (u, ut) = match &w.u {
            Some(u) => (u.data().to_vec(), u.transpose().into_data()),
            None => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            kind,
            g: params.activation(),
            d,
            layer_norm,
            slots,
            u,
            ut,
        })
    }

    fn is_elman(&self) -> bool {
        self.kind == CellKind::Elman
    }

    fn tape(&self, n: usize) -> Tape<T> {
        let nd = n * self.d;
        let zeros = || vec![T::zero(); nd];
        Tape {
            h: zeros(),
            proj: self.slots.iter().map(|_| zeros()).collect(),
            proj_inv_std: self.slots.iter().map(|_| vec![T::one(); n]).collect(),
            i: zeros(),
            f: zeros(),
            o: zeros(),
            pre: zeros(),
            hu: zeros(),
            hu_inv_std: vec![T::one(); n],
        }
    }

    /// Projection rows `X·W_s + b_s` for every slot, normalised if enabled.
    fn project_all(&self, x: &[T], n: usize, tape: &mut Tape<T>) {
        let d = self.d;
        for (s, slot) in self.slots.iter().enumerate() {
            let p = &mut tape.proj[s];
            for row in p.chunks_exact_mut(d) {
                row.copy_from_slice(&slot.b);
            }
            gemm_acc(x, &slot.w, p, n, d, d);
            if self.layer_norm {
                for (t, row) in p.chunks_exact_mut(d).enumerate() {
                    tape.proj_inv_std[s][t] = normalise(row);
                }
            }
        }
    }

    /// Projection row `t` computed from `x_t` alone.
    fn project_row(&self, x_t: &[T], t: usize, tape: &mut Tape<T>) {
        let d = self.d;
        for (s, slot) in self.slots.iter().enumerate() {
            let row = &mut tape.proj[s][t * d..(t + 1) * d];
            row.copy_from_slice(&slot.b);
            vecmat_acc(x_t, &slot.w, row);
            if self.layer_norm {
                tape.proj_inv_std[s][t] = normalise(row);
            }
        }
    }

    /// The in-loop part of step `t`: element-wise for the gated kinds,
    /// `h·U` plus element-wise for Elman.
    fn step(&self, t: usize, tape: &mut Tape<T>) {
        let d = self.d;
        let r = t * d..(t + 1) * d;
        let (past, cur) = tape.h.split_at_mut(t * d);
        let h_prev: &[T] = if t == 0 { &[] } else { &past[(t - 1) * d..] };
        let h = &mut cur[..d];
        let hp = |j: usize| if t == 0 { T::zero() } else { h_prev[j] };
        let one = T::one();
        if self.is_elman() {
            let hu = &mut tape.hu[r.clone()];
            hu.fill(T::zero());
            if t > 0 {
                vecmat_acc(h_prev, &self.u, hu);
            }
            if self.layer_norm {
                tape.hu_inv_std[t] = normalise(hu);
            }
            let a = &tape.proj[0][r];
            for j in 0..d {
                h[j] = self.g.apply(a[j] + hu[j]);
            }
            return;
        }
        let proj = |s: usize| &tape.proj[s][r.clone()];
        for j in 0..d {
            let hj = hp(j);
            let (q, k, v) = match self.kind {
                CellKind::Lrn | CellKind::Olrn => (proj(0)[j], proj(1)[j], proj(2)[j]),
                CellKind::Glrn => (proj(0)[j], T::zero(), proj(1)[j]),
                _ => (T::zero(), T::zero(), proj(0)[j]),
            };
            let (i, f) = match self.kind {
                CellKind::Lrn | CellKind::Olrn => (sigmoid(k + hj), sigmoid(q - hj)),
                CellKind::Glrn => {
                    let f = sigmoid(q - hj);
                    (one - f, f)
                }
                _ => {
                    let f = sigmoid(-hj);
                    (one - f, f)
                }
            };
            let u = i * v + f * hj;
            tape.i[t * d + j] = i;
            tape.f[t * d + j] = f;
            tape.pre[t * d + j] = u;
            h[j] = if self.kind == CellKind::Olrn {
                let o = sigmoid(proj(3)[j] - u);
                tape.o[t * d + j] = o;
                o * u
            } else {
                self.g.apply(u)
            };
        }
    }

    fn forward(&self, lane: &Lane<T>, n: usize, mode: BenchMode) -> Tape<T> {
        let d = self.d;
        let mut tape = self.tape(n);
        if mode == BenchMode::Fused {
            self.project_all(&lane.x, n, &mut tape);
        }
        for t in 0..n {
            if mode == BenchMode::Naive {
                self.project_row(&lane.x[t * d..(t + 1) * d], t, &mut tape);
            }
            self.step(t, &mut tape);
        }
        tape
    }

    /// Element-wise backward of step `t`. Writes the projection gradients of
    /// the step (before normalisation is undone) into `dp[s]` row `t`, the
    /// Elman `h·U` gradient into `dhu` row `t`, and returns the gradient
    /// flowing into `h_{t-1}` via `carry`.
    fn step_back(&self, t: usize, tape: &Tape<T>, dh_t: &[T], carry: &mut [T], dp: &mut [Vec<T>], dhu: &mut [T]) {
        let d = self.d;
        let one = T::one();
        let r = t * d..(t + 1) * d;
        let h = &tape.h[r.clone()];
        let hp = |j: usize| if t == 0 { T::zero() } else { tape.h[(t - 1) * d + j] };
        if self.is_elman() {
            let dz: Vec<T> = (0..d).map(|j| (dh_t[j] + carry[j]) * self.g.derivative_from_value(h[j])).collect();
            self.unnormalise(&dz, &tape.proj[0][r.clone()], tape.proj_inv_std[0][t], &mut dp[0][r.clone()]);
            self.unnormalise(&dz, &tape.hu[r.clone()], tape.hu_inv_std[t], &mut dhu[r.clone()]);
            carry.fill(T::zero());
            vecmat_acc(&dhu[r], &self.ut, carry);
            return;
        }
        for j in 0..d {
            let idx = t * d + j;
            let dh = dh_t[j] + carry[j];
            let (i, f, u) = (tape.i[idx], tape.f[idx], tape.pre[idx]);
            let du = if self.kind == CellKind::Olrn {
                let o = tape.o[idx];
                let s = o * (one - o);
                dp[3][idx] = dh * u * s;
                dh * (o - u * s)
            } else {
                dh * self.g.derivative_from_value(h[j])
            };
            let hj = hp(j);
            let v_slot = match self.kind {
                CellKind::Lrn | CellKind::Olrn => 2,
                CellKind::Glrn => 1,
                _ => 0,
            };
            let v = tape.proj[v_slot][idx];
            dp[v_slot][idx] = du * i;
            let di = du * v;
            let df = du * hj;
            let mut dhp = du * f;
            match self.kind {
                CellKind::Lrn | CellKind::Olrn => {
                    let dk = di * i * (one - i);
                    let dq = df * f * (one - f);
                    dp[0][idx] = dq;
                    dp[1][idx] = dk;
                    dhp = dhp + dk - dq;
                }
                CellKind::Glrn => {
                    let dq = (df - di) * f * (one - f);
                    dp[0][idx] = dq;
                    dhp = dhp - dq;
                }
                _ => {
                    dhp = dhp - (df - di) * f * (one - f);
                }
            }
            carry[j] = dhp;
        }
        if self.layer_norm {
            for (s, g) in dp.iter_mut().enumerate() {
                let row = g[r.clone()].to_vec();
                self.unnormalise(&row, &tape.proj[s][r.clone()], tape.proj_inv_std[s][t], &mut g[r.clone()]);
            }
        }
    }

    /// Maps a gradient through the normalisation, or copies it when disabled.
    fn unnormalise(&self, dy: &[T], x_hat: &[T], inv_std: T, out: &mut [T]) {
        if self.layer_norm {
            let ones = vec![T::one(); dy.len()];
            layer_norm_backward_slice(dy, x_hat, &ones, inv_std, out);
        } else {
            out.copy_from_slice(dy);
        }
    }

    fn backward(&self, lane: &Lane<T>, tape: &Tape<T>, n: usize, mode: BenchMode) -> Grads<T> {
        let d = self.d;
        let ns = self.slots.len();
        let mut dp: Vec<Vec<T>> = (0..ns).map(|_| vec![T::zero(); n * d]).collect();
        let mut dhu = vec![T::zero(); n * d];
        let mut carry = vec![T::zero(); d];
        let mut g = Grads {
            w: (0..ns).map(|_| vec![T::zero(); d * d]).collect(),
            b: (0..ns).map(|_| vec![T::zero(); d]).collect(),
            u: vec![T::zero(); if self.is_elman() { d * d } else { 0 }],
            x: vec![T::zero(); n * d],
        };
        for t in (0..n).rev() {
            self.step_back(t, tape, &lane.dh[t * d..(t + 1) * d], &mut carry, &mut dp, &mut dhu);
            if mode == BenchMode::Naive {
                let r = t * d..(t + 1) * d;
                let x_t = &lane.x[r.clone()];
                for (s, slot) in self.slots.iter().enumerate() {
                    let dps = &dp[s][r.clone()];
                    rank_one_acc(x_t, dps, &mut g.w[s]);
                    for (b, &v) in g.b[s].iter_mut().zip(dps) {
                        *b = *b + v;
                    }
                    vecmat_acc(dps, &slot.wt, &mut g.x[r.clone()]);
                }
                if self.is_elman() && t > 0 {
                    rank_one_acc(&tape.h[(t - 1) * d..t * d], &dhu[r], &mut g.u);
                }
            }
        }
        if mode == BenchMode::Fused {
            for (s, slot) in self.slots.iter().enumerate() {
                gemm_acc(&lane.xt, &dp[s], &mut g.w[s], d, n, d);
                for row in dp[s].chunks_exact(d) {
                    for (b, &v) in g.b[s].iter_mut().zip(row) {
                        *b = *b + v;
                    }
                }
                gemm_acc(&dp[s], &slot.wt, &mut g.x, n, d, d);
            }
            if self.is_elman() && n > 1 {
                let ht = transpose(&tape.h[..(n - 1) * d], n - 1, d);
                gemm_acc(&ht, &dhu[d..], &mut g.u, d, n - 1, d);
            }
        }
        g
    }
}

/// `out[i][j] += a[i] · b[j]`.
fn rank_one_acc<T: Real>(a: &[T], b: &[T], out: &mut [T]) {
    let n = b.len();
    for (&av, row) in a.iter().zip(out.chunks_exact_mut(n)) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o = *o + av * bv;
        }
    }
}

/// Largest absolute difference over all outputs, divided by
/// `max(1, largest magnitude)`.
fn scaled_diff<T: Real>(a: &[&[T]], b: &[&[T]]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 1.0f64;
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.iter().zip(y.iter()) {
            diff = diff.max((p - q).as_f64().abs());
            scale = scale.max(p.as_f64().abs());
        }
    }
    diff / scale
}

struct Prepared<T> {
    config: BenchConfig,
    kernel: Kernel<T>,
    lanes: Vec<Lane<T>>,
}

impl<T: Real> Prepared<T> {
    fn new(config: &BenchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(config.seed, 0);
        let kernel = Kernel::new(config.kind, config.d, config.layer_norm, &mut rng)?;
        let (n, d) = (config.n, config.d);
        let lanes = (0..config.batch)
            .map(|b| {
                let mut rng = Rng::with_stream(config.seed, 1 + b as u64);
                let mut draw = |len: usize| (0..len).map(|_| T::lit(rng.uniform(-1.0, 1.0))).collect::<Vec<T>>();
                let x = draw(n * d);
                let dh = draw(n * d);
                let xt = transpose(&x, n, d);
                Lane { x, xt, dh }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            kernel,
            lanes,
        })
    }

    fn run_lane(&self, lane: &Lane<T>, mode: BenchMode) -> (Tape<T>, Option<Grads<T>>) {
        let n = self.config.n;
        let tape = self.kernel.forward(lane, n, mode);
        let grads = (self.config.pass == Pass::ForwardBackward).then(|| self.kernel.backward(lane, &tape, n, mode));
        (tape, grads)
    }

    /// Runs both modes on every lane and compares all outputs.
    fn equivalence(&self) -> f64 {
        self.lanes
            .par_iter()
            .map(|lane| {
                let (ta, ga) = self.run_lane(lane, BenchMode::Fused);
                let (tb, gb) = self.run_lane(lane, BenchMode::Naive);
                let mut a: Vec<&[T]> = vec![&ta.h];
                let mut b: Vec<&[T]> = vec![&tb.h];
                if let (Some(ga), Some(gb)) = (&ga, &gb) {
                    for (x, y) in ga.w.iter().chain(&ga.b).zip(gb.w.iter().chain(&gb.b)) {
                        a.push(x);
                        b.push(y);
                    }
                    a.extend([&ga.u[..], &ga.x[..]]);
                    b.extend([&gb.u[..], &gb.x[..]]);
                }
                scaled_diff(&a, &b)
            })
            .reduce(|| 0.0, f64::max)
    }

    fn time_once(&self) -> f64 {
        let mode = self.config.mode;
        let start = Instant::now();
        self.lanes.par_iter().for_each(|lane| {
            black_box(self.run_lane(black_box(lane), mode));
        });
        start.elapsed().as_secs_f64()
    }
}

enum AnyPrepared {
    F32(Prepared<f32>),
    F64(Prepared<f64>),
}

impl AnyPrepared {
    fn new(config: &BenchConfig) -> Result<Self> {
        Ok(match config.precision {
            Precision::F32 => Self::F32(Prepared::new(config)?),
            Precision::F64 => Self::F64(Prepared::new(config)?),
        })
    }

    fn equivalence(&self) -> f64 {
        match self {
            Self::F32(p) => p.equivalence(),
            Self::F64(p) => p.equivalence(),
        }
    }

    fn time_once(&self) -> f64 {
        match self {
            Self::F32(p) => p.time_once(),
            Self::F64(p) => p.time_once(),
        }
    }
}

/// Benchmarks one configuration.
pub fn bench(config: &BenchConfig) -> Result<BenchReport> {
    Ok(bench_interleaved(std::slice::from_ref(config))?.remove(0))
}

/// Benchmarks several configurations, alternating between them on every
/// warmup and repeat so slow drift in machine speed affects all alike.
///
/// Every configuration must pass the fused/naive equivalence gate before
/// any timing starts.
pub fn bench_interleaved(configs: &[BenchConfig]) -> Result<Vec<BenchReport>> {
    let prepared = configs.iter().map(AnyPrepared::new).collect::<Result<Vec<_>>>()?;
    let mut gaps = Vec::with_capacity(configs.len());
    for (c, p) in configs.iter().zip(&prepared) {
        let gap = p.equivalence();
        if !(gap <= equivalence_tolerance(c.precision)) {
            return Err(Error::Equivalence(gap));
        }
        gaps.push(gap);
    }
    let warmups = configs.iter().map(|c| c.warmups).max().unwrap_or(0);
    let repeats = configs.iter().map(|c| c.repeats).max().unwrap_or(0);
    let mut times = vec![Vec::new(); configs.len()];
    for round in 0..warmups + repeats {
        for (i, (c, p)) in configs.iter().zip(&prepared).enumerate() {
            if round < warmups {
                if round < c.warmups {
                    p.time_once();
                }
            } else if round - warmups < c.repeats {
                times[i].push(p.time_once());
            }
        }
    }
    let environment = Environment::capture();
    Ok(configs
        .iter()
        .zip(times)
        .zip(gaps)
        .map(|((c, times), gap)| {
            let median_seconds = median(&times);
            BenchReport {
                kind: c.kind.name().into(),
                mode: c.mode,
                pass: c.pass,
                d: c.d,
                n: c.n,
                batch: c.batch,
                precision: c.precision,
                repeats: c.repeats,
                warmups: c.warmups,
                layer_norm: c.layer_norm,
                in_loop_matmul: c.kind == CellKind::Elman,
                equivalence_error: gap,
                times_seconds: times,
                median_seconds,
                steps_per_second: (c.batch * c.n) as f64 / median_seconds,
                environment: environment.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrn_core::cells::{backward_sequence, forward_sequence};

    fn small(kind: CellKind, pass: Pass, ln: bool, precision: Precision) -> BenchConfig {
        BenchConfig {
            d: 6,
            n: 9,
            batch: 3,
            pass,
            layer_norm: ln,
            precision,
            seed: 4,
            ..BenchConfig::new(kind, BenchMode::Fused)
        }
    }

    #[test]
    fn modes_agree_for_every_kind() {
        for kind in CellKind::ALL {
            for pass in [Pass::Forward, Pass::ForwardBackward] {
                for ln in [false, true] {
                    let p = Prepared::<f64>::new(&small(kind, pass, ln, Precision::F64)).unwrap();
                    let gap = p.equivalence();
                    assert!(gap <= 1e-12, "{kind} {pass} ln={ln}: {gap:e}");
                }
            }
        }
    }

    #[test]
    fn f32_modes_agree() {
        for kind in CellKind::ALL {
            let p = Prepared::<f32>::new(&small(kind, Pass::ForwardBackward, true, Precision::F32)).unwrap();
            assert!(p.equivalence() <= 1e-5);
        }
    }

    /// The kernels without normalisation must agree with the library cells.
    #[test]
    fn kernels_match_library_cells() {
        for kind in CellKind::ALL {
            let (d, n) = (5, 7);
            let mut rng = Rng::new(31);
            let kernel = Kernel::<f64>::new(kind, d, false, &mut rng).unwrap();
            let mut rng = Rng::new(31);
            let mut params = CellParams::<f64>::new(kind, kind.default_activation(), d, d, &mut rng).unwrap();
            for (name, m) in params.weights.entries_mut() {
                if name.starts_with('b') {
                    *m = Matrix::uniform(1, d, -0.1, 0.1, &mut rng);
                }
            }
            let x = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
            let dh = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
            let lane = Lane {
                x: x.data().to_vec(),
                xt: x.transpose().into_data(),
                dh: dh.data().to_vec(),
            };
            let traj = forward_sequence(&params, &x, None).unwrap();
            let tape = kernel.forward(&lane, n, BenchMode::Fused);
            let h = traj.hidden_matrix();
            let gap = h.data().iter().zip(&tape.h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap < 1e-12, "{kind}: forward {gap:e}");

            let reference = backward_sequence(&params, &traj, &dh).unwrap();
            let grads = kernel.backward(&lane, &tape, n, BenchMode::Fused);
            let names: &[&str] = match kind {
                CellKind::Lrn => &["w_q", "w_k", "w_v"],
                CellKind::Olrn => &["w_q", "w_k", "w_v", "w_o"],
                CellKind::Glrn => &["w_q", "w_v"],
                CellKind::Elrn => &["w_v"],
                CellKind::Elman => &["w"],
            };
            for (s, name) in names.iter().enumerate() {
                let r = reference.weights.get(name).unwrap();
                let gap = r.data().iter().zip(&grads.w[s]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(gap < 1e-12, "{kind} {name}: {gap:e}");
            }
            let gap = reference.dx.data().iter().zip(&grads.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap < 1e-12, "{kind} dx: {gap:e}");
            if kind == CellKind::Elman {
                let r = reference.weights.get("u").unwrap();
                let gap = r.data().iter().zip(&grads.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(gap < 1e-12, "elman u: {gap:e}");
            }
        }
    }

    #[test]
    fn report_fields_follow_config() {
        let mut c = small(CellKind::Elman, Pass::Forward, false, Precision::F32);
        c.mode = BenchMode::Naive;
        let r = bench(&c).unwrap();
        assert_eq!(r.times_seconds.len(), 5);
        assert_eq!((r.d, r.n, r.batch, r.repeats, r.warmups), (6, 9, 3, 5, 2));
        assert!(r.in_loop_matmul);
        assert!(r.steps_per_second > 0.0);
    }

    #[test]
    fn too_few_repeats_rejected() {
        let mut c = small(CellKind::Lrn, Pass::Forward, false, Precision::F64);
        c.repeats = 3;
        assert!(bench(&c).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
