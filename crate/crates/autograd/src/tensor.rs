//! Dense row-major tensors of rank 0..=2.
//!
//! Everything the velocity-field model touches is a time-major matrix
//! `[T x D]`, a vector, or a scalar, so the tensor type stays deliberately
//! small: contiguous storage, explicit shapes, no strides, no views.

use num_traits::Float;
use std::fmt;

/// Scalar element type. `f64` is the training default; `f32` is an opt-in
/// speed mode (the on-disk clip containers are also 32-bit).
pub trait Element: Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    /// Lossy conversion from an f64 literal.
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}
impl Element for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Error for constructors that take an explicit shape.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape {shape:?} implies {expected} elements, got {actual}")]
pub struct ShapeDataMismatch {
    pub shape: Vec<usize>,
    pub expected: usize,
    pub actual: usize,
}

/// A contiguous row-major tensor. Invariant: `product(shape) == data.len()`.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ..]", self.data[0], self.data[1])
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, ShapeDataMismatch> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); n],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<E>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Build a `[rows x cols]` matrix from a generator on (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self, ShapeDataMismatch> {
        Self::new(vec![rows, cols], data)
    }

    /// Mark this tensor as a differentiable leaf when inserted on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.len() <= 1
    }

    /// Rank-2 row count; vectors are treated as a single row, scalars as 1x1.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> E {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: E) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[E] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(E, E) -> E) -> Self {
        assert_eq!(self.shape, other.shape, "zip on mismatched shapes");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, k: E) -> Self {
        self.map(|v| v * k)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let rows = parts[0].rows();
        assert!(parts.iter().all(|p| p.rows() == rows));
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self {
            shape: vec![rows, total],
            data,
            requires_grad: false,
        }
    }

    /// Split columns into consecutive blocks of the given widths.
    pub fn split_cols(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.cols());
        let rows = self.rows();
        let mut out: Vec<Self> = sizes
            .iter()
            .map(|&w| Self::zeros(vec![rows, w]))
            .collect();
        for r in 0..rows {
            let src = self.row(r);
            let mut off = 0;
            for (part, &w) in out.iter_mut().zip(sizes) {
                part.data[r * w..(r + 1) * w].copy_from_slice(&src[off..off + w]);
                off += w;
            }
        }
        out
    }

    /// First `n` rows of a matrix.
    pub fn take_rows(&self, n: usize) -> Self {
        assert!(n <= self.rows());
        let c = self.cols();
        Self {
            shape: vec![n, c],
            data: self.data[..n * c].to_vec(),
            requires_grad: false,
        }
    }

    /// Repeat the whole matrix `times` along the row axis.
    pub fn tile_rows(&self, times: usize) -> Self {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Self {
            shape: vec![self.rows() * times, self.cols()],
            data,
            requires_grad: false,
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64() as f32).collect(),
            requires_grad: false,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
            requires_grad: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_enforced() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err.expected, 6);
        assert_eq!(err.actual, 5);
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.0f64);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert!(s.is_scalar());
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_fn(3, 2, |r, c| (10 * r + c) as f64);
        let b = Tensor::from_fn(3, 4, |r, c| (100 * r + c) as f64);
        let joined = Tensor::concat_cols(&[&a, &b]);
        assert_eq!(joined.shape(), &[3, 6]);
        let parts = joined.split_cols(&[2, 4]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn tile_and_take_rows() {
        let a = Tensor::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let tiled = a.tile_rows(3);
        assert_eq!(tiled.shape(), &[6, 3]);
        assert_eq!(tiled.row(4), a.row(0));
        assert_eq!(tiled.take_rows(2), a);
    }
}
