pub mod budget;
pub mod checkpoint;
pub mod data;
pub mod dense;
pub mod error;
pub mod label;
pub mod network;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
