//! Pan-sharpening toolkit: a K-stage deep-unfolded half-quadratic-splitting
//! fusion network whose proximal step embeds a pretrained convolutional
//! masked autoencoder, a token masked autoencoder used as a learned
//! consistency loss, Wald-protocol data simulation, classical fusion
//! baselines and the reduced/full resolution metric suite.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations used by the harness.

mod batch;
pub mod baselines;
pub mod degradation;
mod error;
pub mod fingerprint;
pub mod mae;
pub mod metrics;
pub mod raster;
pub mod unfolding;
pub mod wald;

pub use error::{Error, Result};
pub use panfuse_autograd::{Scalar, Tensor};

pub type MsImageF32 = raster::MsImage<f32>;
pub type MsImageF64 = raster::MsImage<f64>;
pub type PanImageF32 = raster::PanImage<f32>;
pub type PanImageF64 = raster::PanImage<f64>;
pub type SamplePairF32 = wald::SamplePair<f32>;
pub type SamplePairF64 = wald::SamplePair<f64>;
pub type ConvMaeF32 = mae::ConvMae<f32>;
pub type TokenMaeF32 = mae::TokenMae<f32>;
pub type UnfoldingModelF32 = unfolding::UnfoldingModel<f32>;
pub type UnfoldingModelF64 = unfolding::UnfoldingModel<f64>;
