pub mod attribution;
pub mod cli;
pub mod discrepancy;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod feature;
pub mod metrics;
pub mod nn;
pub mod quantization;
pub mod taskbench;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
