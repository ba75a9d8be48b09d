//! Graph-constrained house layout generation with a graph-transformer GAN.

pub mod cli;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradsuite;
pub mod graph;
pub mod mpn;
pub mod training;

pub use error::{GtganError, Result};
