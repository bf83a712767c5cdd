//! Minimal reverse-mode differentiation engine with the layers the unrolled
//! reconstruction network needs: dense/conv/attention primitives, layer
//! normalization, wavelet transforms as tape ops, embedded linear operators
//! with exact transposes, an MSE loss, and a decoupled-weight-decay Adam
//! optimizer.
//!
//! Values are generic over [`crate::scalar::Scalar`]: `f32` for training,
//! `f64` for finite-difference gradient verification.

mod check;
mod layers;
mod optim;
mod tape;

pub use check::{central_difference, relative_l2};
pub use layers::{init_swin_params, swin_block, swin_vars, SwinVars};
pub use optim::{adamw_step, AdamW, OptimizerState, ParamSet};
pub use tape::{Tape, Var};

use thiserror::Error;

use crate::scalar::Scalar;

/// Errors produced when building or differentiating a computation graph.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tape already consumed by backward")]
    ConsumedTape,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
}

/// A linear operator embedded in the graph as a single differentiable node;
/// its backward pass is the exact transpose. Application always runs in
/// 64-bit regardless of the tape scalar type.
pub trait LinearOp: Send + Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

/// A shaped value buffer with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, AutodiffError> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(AutodiffError::Shape(format!(
                "shape {shape:?} wants {len} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None, requires_grad: true })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, values: vec![T::zero(); len], grad: None, requires_grad: true }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<(), AutodiffError> {
        if delta.len() != self.values.len() {
            return Err(AutodiffError::Shape(format!(
                "gradient length {} does not match tensor length {}",
                delta.len(),
                self.values.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, &d)| *g = *g + d);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
