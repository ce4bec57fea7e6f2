//! Dense row-major tensors and a reverse-mode tape.
//!
//! [`Tensor`] owns its data; every differentiable operation lives on
//! [`Tape`], which records the forward pass and replays adjoints on
//! [`Tape::backward`].

mod kernels;
mod tape;

pub use kernels::{conv_output_len, log_sum_exp, pool_output_len};
pub use tape::{Activation, BatchNormMode, BatchNormState, BatchStats, Tape, Var};

use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Max-subtracted softmax of a single row.
pub fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let mut out = row.to_vec();
    kernels::softmax_in_place(&mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            );
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite value {} at flat index {}", data[i], i);
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Skips the finiteness scan. Used by kernels whose inputs are already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: S) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    /// Marks the tensor as a leaf whose gradient `backward` should populate.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<S>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            bail!(Usage, "item() on tensor of shape {:?}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts to another scalar precision (gradient is dropped).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Element at a multi-index, row-major.
    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }
}
