//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Every reduction runs in a fixed order (left to right over the reduced
//! index), so results are bitwise reproducible run to run. The element type is
//! generic so finite-difference oracles can evaluate the same graph in `f64`;
//! production paths use `f32`.

pub mod rng;
pub mod sftn;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::Range;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

pub use rng::{seeded_gaussian, SeededRng};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape(), "zip_map")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row_broadcast(&mut self, row: &[T]) {
        debug_assert_eq!(row.len(), self.cols);
        for i in 0..self.rows {
            for (a, &b) in self.row_mut(i).iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    /// Column sums accumulated row by row, in row order.
    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Self {
        Self::from_fn(self.rows, range.len(), |i, j| self.get(i, range.start + j))
    }

    /// Writes `src` into columns starting at `col`.
    pub fn set_cols(&mut self, col: usize, src: &Self) {
        debug_assert_eq!(src.rows, self.rows);
        for i in 0..self.rows {
            self.row_mut(i)[col..col + src.cols].copy_from_slice(src.row(i));
        }
    }

    pub fn concat_cols(a: &Self, b: &Self) -> Result<Self> {
        if a.rows != b.rows {
            return Err(Error::Config(format!(
                "concat_cols: {} rows vs {} rows",
                a.rows, b.rows
            )));
        }
        let mut out = Self::zeros(a.rows, a.cols + b.cols);
        out.set_cols(0, a);
        out.set_cols(a.cols, b);
        Ok(out)
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::Config("concat_rows: column mismatch".into()));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            rows: parts.iter().map(|p| p.rows).sum(),
            cols,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    fn expect_shape(&self, shape: (usize, usize), what: &str) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::Config(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(())
    }
}

impl Matrix<f32> {
    /// Bitwise equality (distinguishes `-0.0` from `0.0` and compares NaN payloads).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Row-major boolean matrix; `true` means attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BoolMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Every allowed pair of `self` is allowed in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Half-open column range spanning the allowed entries of each row.
    /// Rows with nothing allowed get an empty range.
    pub fn row_spans(&self) -> Vec<Range<usize>> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                match (row.iter().position(|&b| b), row.iter().rposition(|&b| b)) {
                    (Some(lo), Some(hi)) => lo..hi + 1,
                    _ => 0..0,
                }
            })
            .collect()
    }
}

fn check_inner(a: (usize, usize), b: (usize, usize), inner_a: usize, inner_b: usize) -> Result<()> {
    if inner_a != inner_b {
        return Err(Error::Config(format!(
            "matmul dimension mismatch: {a:?} x {b:?}"
        )));
    }
    Ok(())
}

/// `a · b`, accumulating each output left to right over the inner dimension.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_inner(a.shape(), b.shape(), a.cols, b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_inner(a.shape(), b.shape(), a.rows, b.rows)?;
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &brj) in orow.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`; each output is a dot product over the shared column index.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_inner(a.shape(), b.shape(), a.cols, b.cols)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place softmax over the allowed entries of one row. Disallowed entries
/// are replaced by the most negative finite value before the max-subtracted
/// exponentials and come out as exactly `0.0`. Returns `false` when nothing
/// in the row is allowed.
pub fn softmax_row_masked<T: Real>(row: &mut [T], allowed: &[bool]) -> bool {
    let sentinel = T::min_value();
    let mut max = sentinel;
    let mut any = false;
    for (v, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            any = true;
        } else {
            *v = sentinel;
        }
        max = max.max(*v);
    }
    if !any {
        return false;
    }
    let mut sum = T::zero();
    for (v, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            let e = (*v - max).exp();
            *v = e;
            sum += e;
        }
    }
    for (v, &ok) in row.iter_mut().zip(allowed) {
        *v = if ok { *v / sum } else { T::zero() };
    }
    true
}

pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::min_value(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        sum += e;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows<T: Real>(scores: &Matrix<T>) -> Matrix<T> {
    let mut out = scores.clone();
    for i in 0..out.rows {
        softmax_row(out.row_mut(i));
    }
    out
}

pub fn masked_softmax_rows<T: Real>(scores: &Matrix<T>, mask: &BoolMatrix) -> Result<Matrix<T>> {
    if scores.shape() != mask.shape() {
        return Err(Error::Config(format!(
            "masked_softmax_rows: scores {:?} vs mask {:?}",
            scores.shape(),
            mask.shape()
        )));
    }
    let mut out = scores.clone();
    for i in 0..out.rows {
        if !softmax_row_masked(out.row_mut(i), mask.row(i)) {
            return Err(Error::Invariant(format!("attention row {i} is fully masked")));
        }
    }
    Ok(out)
}

/// Given softmax output `p` and upstream `dp` for one row, writes the
/// gradient w.r.t. the pre-softmax scores into `dp`.
pub fn softmax_row_backward<T: Real>(p: &[T], dp: &mut [T]) {
    let inner = dot(p, dp);
    for (g, &pi) in dp.iter_mut().zip(p) {
        *g = pi * (*g - inner);
    }
}

/// Per-row statistics kept for the backward pass of [`layer_norm`].
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub inv_std: Vec<T>,
}

/// Row-wise normalization to zero mean and unit variance (no affine part),
/// using a two-pass mean/variance.
pub fn layer_norm<T: Real>(x: &Matrix<T>, eps: T) -> Matrix<T> {
    layer_norm_with_stats(x, eps).0
}

pub fn layer_norm_with_stats<T: Real>(x: &Matrix<T>, eps: T) -> (Matrix<T>, NormStats<T>) {
    let n = T::from_usize(x.cols).unwrap();
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        inv_std.push(r);
    }
    (out, NormStats { inv_std })
}

/// Gradient of [`layer_norm`] w.r.t. its input, given the normalized output
/// and the upstream gradient.
pub fn layer_norm_backward<T: Real>(
    grad_out: &Matrix<T>,
    normalized: &Matrix<T>,
    stats: &NormStats<T>,
) -> Matrix<T> {
    let n = T::from_usize(grad_out.cols).unwrap();
    let mut out = Matrix::zeros(grad_out.rows, grad_out.cols);
    for i in 0..grad_out.rows {
        let g = grad_out.row(i);
        let xh = normalized.row(i);
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for (&gi, &xi) in g.iter().zip(xh) {
            mean_g += gi;
            mean_gx += gi * xi;
        }
        mean_g /= n;
        mean_gx /= n;
        let r = stats.inv_std[i];
        for ((o, &gi), &xi) in out.row_mut(i).iter_mut().zip(g).zip(xh) {
            *o = r * (gi - mean_g - xi * mean_gx);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}
