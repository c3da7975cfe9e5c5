//! Minimal CPU neural-network building blocks.
//!
//! Layers are plain parameter holders. `forward` borrows the layer immutably
//! and returns whatever cache the matching `backward` needs, so a batch can
//! keep one cache per sample while gradients accumulate into the layer's
//! [`Param`]s. Volumes are single samples laid out as `[C, D, H, W]`; 2D maps
//! use `D = 1`.

mod blocks;
mod conv;
mod layers;
mod optim;
mod param;
mod tensor;

pub use blocks::{ConvBlock, ConvBlockCache, ConvBlockSpec, ResidualBlock, ResidualBlockCache};
pub use conv::Conv3d;
pub use layers::{
    avg_pool3d, avg_pool3d_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, ChannelAffine, Linear,
};
pub use optim::{clip_grad_norm, Sgd, SgdConfig};
pub use param::{Init, Module, Param, ParamVisitor};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid layer configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
