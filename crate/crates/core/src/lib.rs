pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
pub mod cells;
pub mod nn;
pub mod codec;
pub mod codes;
pub mod entropy;
pub mod image;
pub mod metrics;
pub mod rd;
pub mod container;
pub mod bitstream;
pub mod data;
pub mod synthetic;
pub mod train;
pub mod evaluate;
