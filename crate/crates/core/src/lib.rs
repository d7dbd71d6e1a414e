pub mod cli;
pub mod config;
pub mod corpus;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod trainer;
pub mod tensor;

pub use error::{GuimError, Result};
