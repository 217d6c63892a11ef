//! Dense row-major matrices, activations and layer normalisation.
//!
//! Vectors are 1×d matrices. Every product accumulates over the inner index
//! in ascending order starting from zero, whatever the blocking, so a row
//! computed inside a batched product is bit-identical to the same row computed
//! on its own.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar type of the crate: `f64` for tests and training, `f32` for
/// throughput benchmarks.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// Glorot/Xavier uniform initialisation in `±sqrt(6 / (rows + cols))`.
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let bound = libm::sqrt(6.0 / (rows + cols) as f64);
        Self::from_fn(rows, cols, |_, _| T::lit(rng.uniform(-bound, bound)))
    }

    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| T::lit(rng.uniform(lo, hi)))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        assert!(r < self.rows && c < self.cols, "index ({r}, {c}) out of bounds");
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        assert!(r < self.rows && c < self.cols, "index ({r}, {c}) out of bounds");
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_matrix(&self, r: usize) -> Result<Self> {
        if r >= self.rows {
            return Err(Error::OutOfRange {
                what: "row",
                index: r,
                len: self.rows,
            });
        }
        Ok(Self::row_vector(self.row(r).to_vec()))
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        self.same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
        Ok(())
    }

    /// Adds a 1×cols row to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (a, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *a = *a + b;
            }
        }
        Ok(out)
    }

    /// 1×cols sums down each column, rows accumulated in order.
    pub fn column_sums(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o = *o + x;
            }
        }
        Self::row_vector(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_acc(&self.data, &other.data, &mut out.data, self.rows, self.cols, other.cols);
        Ok(out)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(|x| x.tanh())
    }

    /// `s ⊙ (1 − s)` from a sigmoid output.
    pub fn sigmoid_prime_from_value(&self) -> Self {
        self.map(|s| s * (T::one() - s))
    }

    /// `1 − t ⊙ t` from a tanh output.
    pub fn tanh_prime_from_value(&self) -> Self {
        self.map(|t| T::one() - t * t)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-wise layer normalisation: every row is normalised with its own
    /// mean and variance, then scaled by `gain` and shifted by `bias`
    /// (both 1×cols).
    pub fn layer_norm_rows(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        if gain.shape() != (1, self.cols) || bias.shape() != (1, self.cols) {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape(),
                right: gain.shape(),
            });
        }
        check_eps(eps)?;
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            layer_norm_slice(self.row(r), &gain.data, &bias.data, eps, &mut out.data[r * self.cols..(r + 1) * self.cols]);
        }
        Ok(out)
    }
}

fn check_eps<T: Real>(eps: T) -> Result<()> {
    if !(eps >= T::zero()) {
        return Err(Error::InvalidArgument(alloc::format!("layer norm epsilon must be >= 0, got {eps}")));
    }
    Ok(())
}

/// Normalises a single row `x` (1×d): `(x − mean) / sqrt(var + eps) ⊙ gain + bias`.
pub fn layer_norm<T: Real>(x: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
    if x.rows != 1 {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape(),
            right: (1, x.cols),
        });
    }
    x.layer_norm_rows(gain, bias, eps)
}

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-6;

/// Statistics kept by [`layer_norm_slice`] for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormStats<T> {
    pub mean: T,
    pub inv_std: T,
}

/// Slice form of layer normalisation; population variance over the row.
pub fn layer_norm_slice<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> LayerNormStats<T> {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv_std * g + b;
    }
    LayerNormStats { mean, inv_std }
}

/// Gradient of [`layer_norm_slice`] with respect to its input, given the
/// upstream gradient `dy`, the normalised values `x_hat` and the gain.
pub fn layer_norm_backward_slice<T: Real>(dy: &[T], x_hat: &[T], gain: &[T], inv_std: T, dx: &mut [T]) {
    let n = T::lit(dy.len() as f64);
    let mut sum_g = T::zero();
    let mut sum_gx = T::zero();
    for ((&d, &xh), &g) in dy.iter().zip(x_hat).zip(gain) {
        let gd = d * g;
        sum_g = sum_g + gd;
        sum_gx = sum_gx + gd * xh;
    }
    for (((o, &d), &xh), &g) in dx.iter_mut().zip(dy).zip(x_hat).zip(gain) {
        *o = inv_std * (d * g - sum_g / n - xh * sum_gx / n);
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Four rows of `a` share each pass over a row of `b`. Each output element
/// still accumulates over `p = 0..k` in order.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    let mut blocks = out.chunks_exact_mut(4 * n);
    let mut i = 0;
    for block in &mut blocks {
        let (o0, rest) = block.split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for ((((x0, x1), x2), x3), &bv) in o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()).zip(brow) {
                *x0 = *x0 + a0 * bv;
                *x1 = *x1 + a1 * bv;
                *x2 = *x2 + a2 * bv;
                *x3 = *x3 + a3 * bv;
            }
        }
        i += 4;
    }
    for o in blocks.into_remainder().chunks_exact_mut(n) {
        vecmat_acc(&a[i * k..(i + 1) * k], b, o);
        i += 1;
    }
}

/// `out[n] += x[k] · b[k×n]`.
pub fn vecmat_acc<T: Real>(x: &[T], b: &[T], out: &mut [T]) {
    let n = out.len();
    for (p, &xv) in x.iter().enumerate() {
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o = *o + xv * bv;
        }
    }
}
