pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod classify;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod features;
pub mod masking;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
