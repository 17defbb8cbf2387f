//! A small from-scratch network core.
//!
//! Layers implement [`Layer`]: an inference `forward`, a caching
//! `forward_train`, and `backward`, which accumulates parameter gradients and
//! returns the input gradient. [`Model`] wires them into the backbone with a
//! segmentation head and a four-branch detection head.

mod adam;
mod block;
pub mod checkpoint;
mod kernels;
mod layers;
mod model;
mod tensor;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use block::{BlockSpec, ResidualBlock, Sequential};
pub use layers::{
    BatchNorm2d, Conv2d, ConvOptions, DepthwiseSeparableConv, Layer, MaxPool2d, Relu, Softmax,
    TransposedConv2d, BATCHNORM_EPS,
};
pub use model::{HeadOutputs, Model, ModelConfig, BACKBONE_STRIDE, BRANCH_NAMES};
pub use tensor::{Param, Tensor};
