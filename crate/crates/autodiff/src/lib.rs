//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] as they execute. Calling
//! [`Graph::backward`] on a scalar output replays the record in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.
//! Tensors are plain row-major buffers; convolution lowers to GEMM through
//! `im2col`.
//!
//! The primitive set is deliberately small: exactly what a DenseNet-style
//! segmentation network with a per-pixel sigmoid head needs.

mod element;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use element::{DType, Element};
pub use error::TensorError;
pub use gradcheck::{grad_check, grad_check_inputs, primitive_suite, GradCheckConfig, GradCheckReport, SplitMixRng};
pub use graph::{Gradients, Graph, Mode, OpKind, RunningStats, Var, BN_EPS, BN_MOMENTUM, BCE_CLAMP};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
