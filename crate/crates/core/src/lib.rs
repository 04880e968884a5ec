pub mod check;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod model;
pub mod nn;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
