//! Variable-horizon diffusion planning in a 2D point-mass maze.

pub mod audit;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod execution;
pub mod maze;
pub mod lp;
pub mod nn;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
