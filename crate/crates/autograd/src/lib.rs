//! Reverse-mode automatic differentiation for the small convolutional and
//! attention networks used by the fusion toolkit.
//!
//! Everything is generic over [`Scalar`] so the same network code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.
//! Images are `[channels, height, width]` tensors; token sequences are
//! `[tokens, dim]` matrices. One [`Graph`] is built per sample and thrown
//! away after the backward pass.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type GraphF32 = Graph<f32>;
pub type GraphF64 = Graph<f64>;
