pub mod datagen;
pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
