//! Dense-tensor numerics: the fixed layer set with forward and backward
//! passes, initialization, Adam, and finite-difference gradient checking.
//!
//! Everything is generic over [`Scalar`]; training runs in `f32` and the
//! `f64` instantiation backs gradient checks.

pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod network;
pub mod ops;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BN_EPS, BN_MOMENTUM};
pub use conv::{conv_output_len, conv_transpose_output_len, ConvGeometry};
pub use gradcheck::{grad_check, grad_check_sequential, GradCheckOptions, GradCheckReport};
pub use network::{kaiming_bound, LayerSpec, Mode, Sequential, Tape};
pub use ops::{argmax, softmax, Activation};
pub use params::{Param, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
