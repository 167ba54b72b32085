pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod schema;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
