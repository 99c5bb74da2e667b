//! Dense tensors and a reverse-mode autodiff tape.
//!
//! Values are stored as flat `f64` buffers in row-major order. A tensor
//! whose dtype is [`DType::F32`] is rounded through `f32` after every
//! operation, so single-precision runs are reproducible bit for bit while
//! all verification paths can stay in double precision. Reductions use a
//! fixed left-to-right summation order for the same reason.

mod check;
mod graph;
mod kernels;

pub use check::{gradient_check, gradient_check_against, rel_error, GradCheckReport, GradCheckRow};
pub use graph::{EltOp, Graph, NodeId, ReduceOp};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: reduction over empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: axis of length {len} not divisible by {by}")]
    NonDivisibleAxis { op: &'static str, len: usize, by: usize },
    #[error("division by zero in element {index}")]
    DivisionByZero { index: usize },
    #[error("{op}: domain error (argument {value} at element {index})")]
    DomainError { op: &'static str, value: f64, index: usize },
    #[error("non-finite value produced by {op}{}", label.as_ref().map(|l| format!(" ({l})")).unwrap_or_default())]
    NonFinite { op: &'static str, label: Option<String> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: dtype mismatch between operands")]
    DTypeMismatch { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// An immutable n-dimensional array of real numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
    grad_tracked: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let mut t = Tensor { shape, data, dtype, grad_tracked: false };
        t.quantize();
        t
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], dtype, grad_tracked: false }
    }

    pub fn full(shape: Vec<usize>, value: f64, dtype: DType) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n], dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::from_vec(vec![], vec![value], dtype)
    }

    pub fn tracked(mut self) -> Tensor {
        self.grad_tracked = true;
        self
    }

    pub fn with_tracking(mut self, tracked: bool) -> Tensor {
        self.grad_tracked = tracked;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn grad_tracked(&self) -> bool {
        self.grad_tracked
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Tensor::from_vec(self.shape.clone(), self.data.clone(), dtype)
            .with_tracking(self.grad_tracked)
    }

    /// Mutate one element; used by finite-difference probes.
    pub fn set(&mut self, index: usize, value: f64) {
        self.data[index] = match self.dtype {
            DType::F32 => value as f32 as f64,
            DType::F64 => value,
        };
    }

    fn quantize(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }
}
