//! Hybrid RGB-event tracking core: event camera simulation, a spiking
//! transformer branch, a ViT branch, unrolled sparse-coding adapters that
//! bridge the two, a tracking head with its losses, operation/energy
//! accounting, and tracking metrics. Everything is f64 and deterministic
//! given seeds; gradients come from the in-crate autodiff tape.

pub mod energy;
pub mod eventsim;
pub mod graph;
pub mod ista;
pub mod metrics;
pub mod params;
pub mod spiking;
pub mod tracker;
pub mod vit;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
