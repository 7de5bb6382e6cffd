pub mod codec;
pub mod config;
pub mod daem;
pub mod dynamics;
pub mod error;
pub mod evaluate;
pub mod fock;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod training;
pub mod wigner;

pub use error::{Error, Result};
