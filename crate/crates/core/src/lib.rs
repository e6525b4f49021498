pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod flows;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod train;
pub mod transfer;

pub use data::SampleSet;
pub use error::{Error, Result};
