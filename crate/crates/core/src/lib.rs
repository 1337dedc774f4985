//! Hierarchical audio deepfake attribution.

pub mod autoencoder;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod kernel;
pub mod pipeline;
pub mod rejection;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = kernel::Tensor<f32>;
pub type Tensor64 = kernel::Tensor<f64>;
pub type ParamStore32 = kernel::ParamStore<f32>;
pub type ParamStore64 = kernel::ParamStore<f64>;
