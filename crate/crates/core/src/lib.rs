//! Recursive-mixture amortized inference for variational autoencoders.

pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
mod linalg;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
