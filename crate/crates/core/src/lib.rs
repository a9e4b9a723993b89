//! Spatio-temporal video classification with 3D residual networks.
//!
//! The engine is generic over the floating-point element type; training runs
//! in `f32` and gradient verification in `f64`. The aliases below name the
//! concrete instantiations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod facefuse;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod util;
pub mod videopipe;

pub use autograd::{GradientRecord, Tape, Var};
pub use error::{Error, Result};
pub use losses::{ClassCenters, LossBreakdown};
pub use model::{BlockSpec, FreezePolicy, Mode, ModelParams, NetworkSpec};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
