//! Minimal CNN building blocks with hand-written backward passes.

mod adam;
mod layers;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use layers::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, BlockTrace, BnStats, Conv2d,
    ConvBlock, ConvSpec, HasTensors, Linear, TensorMut, TensorRef, BN_EPS, BN_MOMENTUM,
};
pub(crate) use layers::join;
pub use scalar::{matmul, Layout, Scalar};
pub use tensor::Tensor;
