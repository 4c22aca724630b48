//! Sparse latent world models.
//!
//! The pipeline learns a sparse latent space with a Tsallis-deformed VAE,
//! masks the latent dimensions that carry no information, fits a Gaussian
//! world model on the remaining state and plans actions with the
//! cross-entropy method.

pub mod cem;
pub mod diffnet;
pub mod env;
pub mod error;
pub mod latent;
pub mod pipeline;
pub mod qvae;
pub mod tsallis;
pub mod world;

#[cfg(test)]
#[path = "../tests/oracles/mod.rs"]
mod testutil;

pub use error::{Error, Result};
