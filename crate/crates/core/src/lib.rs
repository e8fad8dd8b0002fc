pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod seed;
pub mod ssl;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
