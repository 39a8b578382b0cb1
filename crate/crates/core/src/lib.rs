pub mod config;
pub mod corpus;
pub mod costmodel;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
