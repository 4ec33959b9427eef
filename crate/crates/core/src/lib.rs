//! Dynamic recurrent routing over pools of residual units.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for everyday use.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod network;
pub mod nn;
pub mod reset;
pub mod routes;
pub mod scalar;
pub mod selection;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = network::Model<f32>;
pub type Model64 = network::Model<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
