pub mod autodiff;
pub mod crf;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod par;
pub mod pipeline;
mod error;
pub mod exec;
pub mod metrics;
pub mod tensor;
pub mod tir;

pub use error::{Error, Result};
pub use tensor::Tensor;
