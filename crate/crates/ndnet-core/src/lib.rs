//! Narrow deep segmentation backbones, from the ground up: a dense tensor
//! type with forward/backward layer primitives, builders for the narrow
//! bottleneck residual family and its FCN32 head, an exact convolution cost
//! model, SGD training with mIoU evaluation, and dataset/checkpoint plumbing.

pub mod augment;
pub mod bench;
pub mod builder;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod ops;
pub mod tensor;
pub mod train;

pub use builder::{
    attach_fcn32_head, build_fcn32, build_narrow_bottleneck, build_ndnet,
    build_original_bottleneck, BlockSpec, NarrowBottleneckSpec, NetworkSpec, ShortcutKind,
};
pub use cost::{
    asymmetric_ratio, count_exact, design_rule_check, multiadds_narrow_block, multiadds_separable,
    multiadds_standard, params_closed, separable_ratio, ClosedForm, CostQuery, CostReport, Ratio,
};
pub use error::{Error, Result};
pub use graph::{ConvLayer, LayerGraph, ParamClass, ParamKind, Unit};
pub use metrics::{miou, update_confusion, ConfusionMatrix, IouReport};
pub use ops::{BatchNormState, ConvSpec, Grouping, Mode, PoolSpec};
pub use tensor::{Elem, LabelMap, Tensor};
pub use train::{lr_at_step, sgd_momentum_step, train, SgdState, TrainConfig};

/// Caps rayon's global pool from the `NDNET_THREADS` environment variable.
/// Call once at process start; later calls are no-ops.
pub fn configure_threads_from_env() {
    if let Ok(value) = std::env::var("NDNET_THREADS") {
        if let Ok(n) = value.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
