pub mod analysis;
pub mod cli;
pub mod corrector;
pub mod dataset;
pub mod decomp;
pub mod error;
pub mod gaussian;
pub mod mi;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
