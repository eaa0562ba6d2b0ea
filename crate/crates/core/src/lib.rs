pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod samplers;
pub mod tensor;
pub mod tps;

pub use error::{DtnError, Result};
pub use tensor::{LabelMap, Tensor};
