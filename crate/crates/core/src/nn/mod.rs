//! Layer primitives: convolution, transposed convolution, batch
//! normalization, ReLU6, dropout and the segmentation loss.

pub mod activation;
pub mod conv;
pub mod layers;
pub mod loss;
pub mod norm;

pub use activation::{dropout, relu6, Mode};
pub use conv::{conv3d, conv_output_dims, conv_transpose3d};
pub use layers::{bn_relu6, BatchNormParams, ConvParams};
pub use loss::cross_entropy;
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats, BN_EPSILON, BN_MOMENTUM};
