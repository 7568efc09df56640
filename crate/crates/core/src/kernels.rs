//! Dense numeric primitives: row-major matrices, vectors and the handful of
//! kernels the encoder and the scoring logic are built from.
//!
//! Every reduction accumulates in `f64` with a fixed left-to-right order, so
//! results are reproducible bit-for-bit for a given storage type and do not
//! depend on how many threads evaluate the output rows.

use std::ops::{Deref, DerefMut};

use rayon::prelude::*;

use crate::error::{Result, TcaError};
use crate::num::Scalar;

/// Multiply-accumulate count below which products stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TcaError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TcaError::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics, and a zero-width matrix still has rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn as_mut_rows(&mut self) -> impl Iterator<Item = &mut [T]> {
        let cols = self.cols.max(1);
        self.data.chunks_mut(cols)
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

    /// New matrix made of the listed rows, in the listed order.
    pub fn select_rows(&self, ids: &[usize]) -> Self {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(TcaError::Shape(format!(
                "pushed row has {} values, matrix has {} columns",
                row.len(),
                self.cols
            )));
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn remove_row(&mut self, r: usize) {
        self.data.drain(r * self.cols..(r + 1) * self.cols);
        self.rows -= 1;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.wide())).collect(),
        }
    }
}

/// Owned dense vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector<T>(pub Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.wide() * y.wide();
    }
    acc
}

pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(TcaError::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul_nt(a, &b.transpose())
}

/// `a · bᵀ`, the natural product for weights stored as `out × in`.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(TcaError::Shape(format!(
            "matmul {}x{} by transposed {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = Matrix::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }
    let fill = |(i, row): (usize, &mut [T])| {
        let ar = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = T::of(dot(ar, b.row(j)));
        }
    };
    if n * m * a.cols >= PAR_THRESHOLD {
        out.data.par_chunks_mut(m).enumerate().for_each(fill);
    } else {
        out.data.chunks_mut(m).enumerate().for_each(fill);
    }
    Ok(out)
}

/// `w · x` for a single vector, with `w` stored as `out × in`.
pub fn matvec<T: Scalar>(w: &Matrix<T>, x: &[T]) -> Result<Vec<T>> {
    if w.cols != x.len() {
        return Err(TcaError::Shape(format!(
            "matvec {}x{} by vector of {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    Ok(w.iter_rows().map(|r| T::of(dot(r, x))).collect())
}

/// Adds `bias` to every row in place.
pub fn add_bias<T: Scalar>(m: &mut Matrix<T>, bias: &[T]) -> Result<()> {
    if bias.len() != m.cols {
        return Err(TcaError::Shape(format!(
            "bias of {} for {} columns",
            bias.len(),
            m.cols
        )));
    }
    for r in 0..m.rows {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += *b;
        }
    }
    Ok(())
}

/// Softmax of `scale · v`, computed with max subtraction.
pub fn softmax<T: Scalar>(v: &[T], scale: f64) -> Vec<T> {
    softmax_wide(v, scale).into_iter().map(T::of).collect()
}

/// Same as [`softmax`] but keeps the `f64` result.
pub fn softmax_wide<T: Scalar>(v: &[T], scale: f64) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let max = v.iter().map(|x| x.wide() * scale).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x.wide() * scale - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TcaError::Shape(format!(
            "cosine of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(TcaError::DegenerateVector("cosine of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine that treats degenerate inputs as orthogonal.
pub(crate) fn cosine_or_zero<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    cosine(a, b).unwrap_or(0.0)
}

pub const LAYERNORM_EPS: f64 = 1e-5;

pub fn layernorm<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: f64) -> Result<Vec<T>> {
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(TcaError::Shape(format!(
            "layernorm of {} values with gain {} and bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.wide()).sum::<f64>() / n;
    let var = v
        .iter()
        .map(|x| {
            let d = x.wide() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| T::of((x.wide() - mean) * inv * g.wide() + b.wide()))
        .collect())
}

/// Row-wise layernorm of a token matrix.
pub fn layernorm_rows<T: Scalar>(m: &Matrix<T>, gain: &[T], bias: &[T]) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = layernorm(m.row(r), gain, bias, LAYERNORM_EPS)?;
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact-erf GELU.
pub fn gelu<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter().map(|x| T::of(gelu_scalar(x.wide()))).collect()
}

pub fn gelu_in_place<T: Scalar>(m: &mut Matrix<T>) {
    for v in m.data.iter_mut() {
        *v = T::of(gelu_scalar(v.wide()));
    }
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(v: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if !(x > b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}
