//! Small dense numeric kernel: feature grids, per-cell and 3x3 layers with
//! hand-written backward passes, cross-entropy, SGD and a finite-difference
//! gradient checker.
//!
//! Everything is generic over [`Real`] so the same layer code runs in `f32`
//! for training and in `f64` for gradient checking.

mod checkpoint;
mod gradcheck;
mod grid;
mod layers;
mod loss;
mod optim;
mod param;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedTensor};
pub use gradcheck::{grad_check, Differentiable, Evaluation, GradCheckReport};
pub use grid::FeatureGrid;
pub use layers::{
    avg_pool, avg_pool_backward, concat_channels, patchify, relu, relu_backward, relu_signature, split_channels,
    Conv3x3, Linear,
};
pub use loss::{argmax_cells, cell_histograms, softmax_xent, LossValue};
pub use optim::{clip_grad_norm, sgd_step, zero_grads, Adam};
pub use param::ParamTensor;

pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u8, classes: usize },
    #[error("non-finite value in parameter {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> NnError {
    NnError::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
