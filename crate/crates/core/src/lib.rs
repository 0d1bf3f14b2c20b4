pub mod error;
pub mod harness;
pub mod models;
pub mod norm;
pub mod optim;
pub mod polar;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Rng};
