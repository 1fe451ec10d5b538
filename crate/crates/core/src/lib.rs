pub mod cells;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Real, Tape, Tensor, Var};
