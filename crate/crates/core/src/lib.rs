//! Continual test-time adaptation for a small instance classifier.
//!
//! The pipeline trains a backbone with dual-path low-rank adapters on a
//! labeled source domain, fits a conditional latent diffusion model over
//! snapshots of the adapter parameters, and then adapts online to a stream
//! of shifted domains by aligning confident target features to frozen
//! source class centers while regenerating the adapters every step.

pub mod adapter;
pub mod align;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod paramgen;
pub mod rng;
pub mod stream;

pub use error::{Error, Result};
