pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod perturbation;
pub mod postprocess;
pub mod protocol;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
