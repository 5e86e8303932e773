pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod negatives;
pub mod rng;
pub mod samplers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
