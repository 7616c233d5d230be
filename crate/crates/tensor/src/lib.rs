//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The engine is deliberately small: it covers the operators needed by a
//! deformable-attention text spotter (matmul, convolutions, normalisation,
//! softmax, bilinear and multi-scale deformable sampling, losses) and nothing
//! else. Computation is recorded on a [`Graph`] tape; [`Graph::backward`]
//! replays it in reverse.
//!
//! Every operator is generic over [`Float`], so the same code runs in `f32`
//! for training and `f64` for finite-difference verification
//! ([`gradcheck::check_gradients`]).

mod error;
mod float;
mod graph;
mod kernels;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;

pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{DeformLayout, Grads, Graph, Var};
pub use kernels::{bilinear_sample_into, bilinear_weights};
pub use tensor::Tensor;
