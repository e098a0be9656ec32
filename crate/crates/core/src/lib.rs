pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod frames;
pub mod fusion;
pub mod numerics;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod sampling;
pub mod trainer;
pub mod vstf;

pub use error::{Error, Result};
