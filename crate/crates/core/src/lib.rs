//! Invertible flow network with style-aware normalization for content-fixed
//! image-to-image translation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f32` instantiations.

pub mod archive;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod infer;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod perceptual;
pub mod san;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type FlowNetwork32 = flow::FlowNetwork<f32>;
pub type FlowNetwork64 = flow::FlowNetwork<f64>;
pub type SanModule32 = san::SanModule<f32>;
pub type StyleVector32 = san::StyleVector<f32>;
pub type PerceptualEncoder32 = perceptual::PerceptualEncoder<f32>;
pub type PerceptualEncoder64 = perceptual::PerceptualEncoder<f64>;
pub type TrainState32 = train::TrainState<f32>;
pub type Trainer32 = train::Trainer<f32>;
