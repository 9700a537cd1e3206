pub mod amc;
pub mod bench;
pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod hub;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
