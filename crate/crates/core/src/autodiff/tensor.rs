//! Dense row-major tensors.

use super::scalar::Scalar;

/// A dense row-major tensor. Scalars have the empty shape `[]`.
///
/// Shapes are validated eagerly: constructors panic when `data.len()` does not
/// match the shape product, so downstream code can trust `numel()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and matching flat row-major data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { data: vec![T::ZERO; numel], shape }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { data: vec![value; numel], shape }
    }

    /// A rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// A 1-D tensor over `data`.
    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis; 1 for rank-0 scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn lead_rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.last_dim()
        }
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
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.data.len(),
            "tensor: cannot reshape {:?} ({} elements) to {:?}",
            self.shape,
            self.data.len(),
            shape
        );
        Tensor { shape, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "tensor: item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Lossy element-wise cast between scalar widths.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }
}
