//! Non-local U-Net for volumetric segmentation.
//!
//! Tensors are row-major, channel-last `[B, D, H, W, C]`. Everything numeric
//! is generic over [`Scalar`] (`f32` for training and inference, `f64` for
//! gradient checks); the aliases below name the concrete instantiations.

pub mod aggregation;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, ErrorClass, Result};
pub use network::{make_ablation, ModelId, Network, NetworkConfig};
pub use params::{ForwardCtx, ParamStore, SeededRng};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
