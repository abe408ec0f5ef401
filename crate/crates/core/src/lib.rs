//! Desk-scale generative models for grayscale images.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

mod error;
mod scalar;

pub mod data;
pub mod metrics;
pub mod models;
pub mod study;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type ImageSet64 = data::ImageSet<f64>;
pub type ImageSet32 = data::ImageSet<f32>;
pub type ModelParams64 = models::ModelParams<f64>;
pub type ModelParams32 = models::ModelParams<f32>;
