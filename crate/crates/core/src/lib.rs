//! Projection-score representation learning for stochastic dynamical systems.
//!
//! The crate learns feature maps whose span approximates the leading singular
//! subspace of a transfer operator (or the leading eigenspace of a generator), then
//! fits the operator on that representation for spectral analysis and forecasting.
//! Exact oracles for a few benchmark systems make every stage checkable.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod features;
pub mod ndcore;
pub mod regression;
pub mod scores;
pub mod sde;
pub mod systems;
pub mod trainer;

pub use error::{Error, Result};
