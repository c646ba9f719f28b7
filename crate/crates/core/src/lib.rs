pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod nn;
pub mod suites;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor};
