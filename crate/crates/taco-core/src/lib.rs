//! Topology-aware consistency pretraining for multi-modal 3D volumes.
//!
//! A compact, fully deterministic stack: a tape autodiff engine, cosine
//! neighborhood topology, ranking and pseudo-correspondence triplet losses,
//! a token-wise MLP autoencoder, synthetic phantom cohorts, an AdamW
//! trainer, and latent-space alignment metrics.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
