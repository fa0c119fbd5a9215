pub mod scalar;
pub mod tensor;
pub mod image;
pub mod codec;
pub mod iqm;
pub mod nn;
pub mod restormer;
pub mod hat;
pub mod prompt;
pub mod network;
pub mod checkpoint;
pub mod harness;

pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
