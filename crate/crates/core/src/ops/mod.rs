//! Forward kernels and their vector-Jacobian products. These are plain
//! functions over tensors; [`crate::autograd::Tape`] wires them together.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;

pub use conv::{
    conv3d, conv3d_backward, conv3d_backward_direct, conv3d_reference, Conv3dGrads, Conv3dParams,
};
pub use dense::{linear, linear_backward, relu, relu_backward};
pub use norm::{
    batchnorm3d_eval, batchnorm3d_train, batchnorm_backward, BatchNormForward, BN_EPS, BN_MOMENTUM,
};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, max_pool3d, max_pool3d_backward, MaxPool3d,
};
