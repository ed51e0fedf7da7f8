//! Dense row-major `f64` arrays.

use crate::error::{Error, Result};

/// Dense real-valued n-dimensional array stored in row-major order.
///
/// `Tensor` carries values only. Gradient bookkeeping lives in
/// [`Graph`](super::Graph) (for intermediate values) and
/// [`Parameter`](super::Parameter) (for trainable leaves).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape must be a nonempty list of positive integers, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without validating; callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        if data.is_empty() {
            return Self::from_parts(vec![1], vec![0.0]);
        }
        Self::from_parts(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns when viewed as a matrix: leading dims are folded
    /// into the row count.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("nonempty shape");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.as_matrix_dims();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Plain matrix product outside of any graph.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims(self)?;
        let (k2, n) = matrix_dims(other)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.data, (k, 1), &other.data, (n, 1), &mut out);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = matrix_dims(self)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }
}

pub(crate) fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// `c += alpha * a * b` for row/column-strided operands.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with strides
/// `(rsb, csb)`, `c` is a dense row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides; callers pass dims consistent with the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
