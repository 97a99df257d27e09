pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod ndiff;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
