pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod proposals;
pub mod seed;
pub mod study;
pub mod train;
pub mod visualize;

pub use error::{Error, Result};
