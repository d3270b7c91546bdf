pub mod activation;
pub mod data;
pub mod error;
pub mod model;
pub mod oscillator;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
