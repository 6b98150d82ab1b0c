pub mod aggregation;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod patching;
pub mod representation;
pub mod training;

pub use error::{Error, Result};
