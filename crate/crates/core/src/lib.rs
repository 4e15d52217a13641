pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod lstm;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod read;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
