//! HaLoRA: hardware-aware low-rank adaptation at desk scale.
//!
//! Frozen backbone weights live on simulated analog memory whose reads are
//! perturbed by block-wise relative noise; LoRA adapters live in exact
//! digital storage and are trained to stay robust to that noise. The crate
//! provides the noise model, the factored-adapter algebra, a reverse-mode
//! tape for the toy models, the noise-aware training loop with its
//! alignment regularizer, and a seeded evaluation harness that reports
//! accuracy mean ± std per noise level.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
