pub mod error;
pub mod evaluation;
pub mod datasets;
pub mod imaging;
pub mod models;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
