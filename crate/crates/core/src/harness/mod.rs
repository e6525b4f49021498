//! Simulation study: data generators, the source-size sweep, result files
//! and plots.

pub mod config;
pub mod dgp;
pub mod plot;
pub mod results;
pub mod sweep;
