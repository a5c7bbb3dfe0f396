pub mod cli;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ge;
pub mod loss;
pub mod nn;
pub mod par;
pub mod postprocess;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod threshold;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
