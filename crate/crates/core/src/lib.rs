pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod inference;
pub mod latent;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
