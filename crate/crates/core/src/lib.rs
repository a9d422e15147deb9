//! Shift-aware training for point-cloud semantic segmentation under
//! aggressive augmentation.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod oracle;
pub mod pointcloud;
pub mod rng;
pub mod scalar;
pub mod scp;
pub mod segnet;
pub mod ssr;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngKey;
pub use scalar::Scalar;

/// Double-precision aliases used throughout the training pipeline.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamSet = tensor::ParamSet<f64>;
pub type Optimizer = tensor::Optimizer<f64>;
