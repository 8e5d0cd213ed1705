pub mod aggregator;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layers;
pub mod mixer;
pub mod moe;
pub mod params;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
