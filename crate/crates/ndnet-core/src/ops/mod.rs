//! Layer primitives: forward and backward implementations for every op the
//! narrow deep networks use. All ops are pure functions of their inputs;
//! batch-norm's running-stat update is the single exception and mutates its
//! state argument.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod pool;
pub mod upsample;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batchnorm, batchnorm_backward, batchnorm_train_cached, BatchNormState, BnCache};
pub use conv::{
    conv2d, conv2d_asymmetric, conv2d_backward_input, conv2d_backward_weights, conv2d_depthwise,
    ConvSpec, Grouping,
};
pub use loss::{argmax_channels, softmax_cross_entropy};
pub use pool::{maxpool2d, maxpool2d_backward, maxpool2d_with_indices, PoolSpec};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward, resize_bilinear};

/// Whether batch statistics (train) or running statistics (eval) drive
/// normalization, and whether forward passes update running state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
