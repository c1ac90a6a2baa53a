//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a value type: shape plus a flat buffer in row-major order.
//! Gradient bookkeeping lives on [`tape::Tape`], which records operations and
//! replays them backward. Forward kernels in [`ops`] are pure functions so
//! inference never pays for the tape.

pub mod ops;
pub mod optim;
pub mod tape;

use crate::error::{Error, Result};
use std::fmt;

/// Scalar types the tensor stack is generic over.
///
/// Training defaults to `f32`; gradient checks instantiate everything at
/// `f64` for finite-difference headroom.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Row-major C += alpha * A(m,k) * B(k,n) (beta scales existing C).
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
    }

    /// GEMM with explicit row/col strides for A and B, so a transposed
    /// operand is just swapped strides instead of a copy. C is row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    );

}

/// Max flat index touched by an (rows, cols) matrix with the given strides.
fn strided_len(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        assert!(a.len() >= strided_len(m, k, rsa, csa));
        assert!(b.len() >= strided_len(k, n, rsb, csb));
        assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        assert!(a.len() >= strided_len(m, k, rsa, csa));
        assert!(b.len() >= strided_len(k, n, rsb, csb));
        assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense tensor: row-major flat buffer plus shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Build from an explicit buffer; fails unless `data.len() == product(shape)`.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Same buffer under a new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combine; shapes must match exactly.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Accumulate `other` into self elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    /// Root-mean-square of all elements.
    pub fn rms(&self) -> T {
        let sq: T = self.data.iter().map(|&x| x * x).sum();
        (sq / T::from_f64(self.data.len() as f64)).sqrt()
    }

    /// True when every element is finite. The trainer's divergence detector
    /// uses this instead of letting NaN/Inf flow into reports.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64()).collect()
    }

    /// Cast elementwise into another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ... {} elements]", self.data[0], self.data[1], self.data.len())
        }
    }
}

/// Unpack an NCHW shape.
pub(crate) fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("{what} expects a 4-d tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Unpack a matrix shape.
pub(crate) fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::shape(format!("{what} expects a 2-d tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}
