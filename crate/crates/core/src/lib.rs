//! Low-rank adaptation with a single trainable r x r latent matrix between
//! frozen, SVD-derived projections.
//!
//! The crate covers the full desk-scale lifecycle of such adapters:
//!
//! - [`linalg`]: dense matrices, thin QR, Jacobi SVD and the randomized
//!   truncated SVD that builds adapter projections.
//! - [`adapter`]: constructing, applying and merging adapters.
//! - [`training`]: backprop through adapted linear stacks, AdamW, schedules.
//! - [`accounting`]: exact parameter counts and fleet storage budgets.
//! - [`registry`]: bit-exact checkpoint files, a content-addressed registry,
//!   and latent warm starts.
//! - [`experiments`]: synthetic tasks and the SVD-vs-random initialization
//!   ablation harness.

pub mod accounting;
pub mod adapter;
pub mod digest;
mod error;
pub mod experiments;
pub mod linalg;
pub mod registry;
mod rng;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use rng::split_seed;
