//! Dense row-major tensors over `f32`/`f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::err::{CoreError, CoreResult};

/// Element type bound for all numeric code in this crate.
///
/// Implemented for `f32` and `f64`. `num_traits::Float` supplies the math
/// functions (via libm when built without `std`).
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + core::fmt::Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and RNG output.
    fn from_f64c(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).unwrap()
    }
    /// Lossless widening to `f64`, used for reductions and reporting.
    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}

/// Dense tensor with row-major layout (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and matching flat data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> CoreResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Data(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    /// Tensor filled with one value.
    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    /// Elementwise map into a possibly different scalar type.
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Widens every element to `f64`.
    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x.to_f64c())
    }

    /// In-place `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// In-place `self *= value`.
    pub fn scale_assign(&mut self, value: T) {
        for a in self.data.iter_mut() {
            *a = *a * value;
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64c()).sum()
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-major offset for a 2D tensor.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Three spatial extents, used wherever a tensor is interpreted as a
/// channels-first volume `[C, d0, d1, d2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims3(pub usize, pub usize, pub usize);

impl Dims3 {
    pub fn count(&self) -> usize {
        self.0 * self.1 * self.2
    }

    /// Row-major offset of (z, y, x) within one channel.
    #[inline]
    pub fn offset(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.1 + y) * self.2 + x
    }

    pub fn halved(&self) -> Dims3 {
        Dims3(self.0 / 2, self.1 / 2, self.2 / 2)
    }

    pub fn doubled(&self) -> Dims3 {
        Dims3(self.0 * 2, self.1 * 2, self.2 * 2)
    }

    pub fn to_array(&self) -> [usize; 3] {
        [self.0, self.1, self.2]
    }
}
