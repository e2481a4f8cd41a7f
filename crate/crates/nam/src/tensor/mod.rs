//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a value-semantic n-dimensional array (rank 0..=2 in
//! practice). [`Tape`] records an operation graph and replays adjoints in
//! reverse execution order; see the module-level ops on [`Tape`] for the
//! differentiable vocabulary. [`adam::Adam`] applies parameter updates and
//! [`checkpoint`] round-trips named parameter maps through JSON.

pub mod adam;
pub mod checkpoint;
pub mod init;
mod linalg;
mod tape;

pub use linalg::{axpy, dot, matmul as matmul_raw, matvec as dot_rows, outer as outer_raw};
pub use tape::{Tape, Var};

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Element type of tensors: `f32` for training, `f64` for property tests.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Epsilon used by L2 normalization to keep it total at zero.
    fn norm_eps() -> Self {
        Self::from_f64(1e-8).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} do not conform")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: axis of length zero")]
    EmptyAxis { op: &'static str },
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("tensor data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("backward seed must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    DetachedVar,
    #[error("masked cross-entropy: no masked positions")]
    NoMaskedPositions,
    #[error("{what} contains a non-finite value")]
    NonFinite { what: String },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. Value-semantic: clones never alias.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// One-hot basis vector e_i of the given length.
    pub fn basis(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(TensorError::IndexOutOfRange {
                op: "basis",
                index,
                bound: len,
            });
        }
        let mut data = vec![S::zero(); len];
        data[index] = S::one();
        Ok(Self::vector(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row and column count of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::BadShape {
                op,
                expected: "a rank-2 tensor",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    /// Converts element type, used to runf32 parameters through f64 checks.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| T::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// L2-normalizes a slice in place to x/(|x|+eps); total at zero.
pub fn l2_normalize_eps<S: Scalar>(x: &mut [S]) {
    let norm = x.iter().map(|&v| v * v).sum::<S>().sqrt();
    let denom = norm + S::norm_eps();
    for v in x.iter_mut() {
        *v = *v / denom;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_mismatched_data_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                expected: 6,
                got: 5
            }
        );
    }

    #[test]
    fn basis_vector() {
        let e2 = Tensor::<f64>::basis(4, 2).unwrap();
        assert_eq!(e2.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(Tensor::<f64>::basis(4, 4).is_err());
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut v = [3.0_f64, 4.0];
        l2_normalize_eps(&mut v);
        assert!((v[0] - 0.6).abs() < 1e-7);
        assert!((v[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn l2_normalize_zero_is_total() {
        let mut v = [0.0_f64, 0.0];
        l2_normalize_eps(&mut v);
        assert_eq!(v, [0.0, 0.0]);
    }
}
