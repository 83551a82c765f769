use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    Mismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("{op}: channel mismatch, expected {expected} input channels, got {got}")]
    Channels { op: &'static str, expected: usize, got: usize },
    #[error("{op}: spatial dimension {dim} must be even")]
    OddDim { op: &'static str, dim: usize },
    #[error("{op}: expected a 5-d array, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("data length {got} does not match shape product {expected}")]
    Length { expected: usize, got: usize },
}

/// Floating-point element type for the engine.
pub trait Real:
    Float + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + std::iter::Sum
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = A·B + beta·C` on row-major matrices, `A` is `m x k` (or its
    /// transpose when `trans_a`), `B` is `k x n` (or transpose).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], trans_a: bool, b: &[Self], trans_b: bool, beta: Self, c: &mut [Self]) {
        let (rsa, csa) = strides(m, k, trans_a);
        let (rsb, csb) = strides(k, n, trans_b);
        Self::gemm_strided(m, k, n, Mat { data: a, rs: rsa, cs: csa }, Mat { data: b, rs: rsb, cs: csb }, beta, c, n);
    }

    /// `C = A·B + beta·C` with explicit strides; `C` has row stride `ldc`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(m: usize, k: usize, n: usize, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: &mut [Self], ldc: usize);
}

/// A strided matrix view over a slice.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: isize,
    pub cs: isize,
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // strides of the logical (rows x cols) matrix
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
            fn gemm_strided(m: usize, k: usize, n: usize, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: &mut [Self], ldc: usize) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.rs >= 0 && a.cs >= 0 && b.rs >= 0 && b.cs >= 0, "negative stride");
                assert!(
                    a.data.len() >= max_offset(m, k, a.rs, a.cs)
                        && b.data.len() >= max_offset(k, n, b.rs, b.cs)
                        && c.len() >= max_offset(m, n, ldc as isize, 1),
                    "gemm operand too small"
                );
                // SAFETY: non-negative strides and the length checks above keep every
                // addressed element of A, B and C inside its slice.
                unsafe {
                    $gemm(m, k, n, 1.0, a.data.as_ptr(), a.rs, a.cs, b.data.as_ptr(), b.rs, b.cs, beta, c.as_mut_ptr(), ldc as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array of up to five dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> NdArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, ShapeError> {
        let expected = shape.iter().product();
        if data.len() != expected {
            return Err(ShapeError::Length { expected, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &NdArray<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> NdArray<U> {
        NdArray { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    /// `(n, c, x, y, z)` for a 5-d array.
    pub(crate) fn dims5(&self, op: &'static str) -> Result<[usize; 5], ShapeError> {
        match self.shape[..] {
            [n, c, x, y, z] => Ok([n, c, x, y, z]),
            _ => Err(ShapeError::Rank { op, shape: self.shape.clone() }),
        }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: NdArray<T>,
    pub grad: NdArray<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: NdArray<T>) -> Self {
        let grad = NdArray::zeros(value.shape());
        Self { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param { name: self.name.clone(), value: self.value.cast(), grad: self.grad.cast() }
    }
}
