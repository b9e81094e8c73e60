//! Rank-4 tensors, the layer kernels of both networks, and the tape that
//! differentiates through them.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use conv::{conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, ConvGeometry, Padding};
pub use norm::{batchnorm, batchnorm_backward, BatchNormStats, DEFAULT_BN_EPSILON};
pub use ops::{
    concat_channels, dropout, leaky_relu, relu, sigmoid, split_channels, tanh_act, zero_pad, Activation,
    DEFAULT_LEAKY_SLOPE,
};
pub use params::{Param, ParamStore};
pub use tape::{Gradients, Tape, TraceEntry, Var};
pub use tensor::{Scalar, Shape, Tensor4};
