//! Optimal investment for an exponential-utility investor who sees Bachelier
//! prices a fixed time ahead but pays quadratic temporary impact costs.
//!
//! The crate provides the closed-form optimal policy, value and certainty
//! equivalent, a Monte Carlo engine that checks them, and an independent
//! numerical solver for the dual (entropy-penalized) problem.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod cli;
pub mod cg;
pub mod dual_oracle;
pub mod error;
pub mod kernels;
pub mod params;
pub mod policy;
pub mod market_sim;
pub mod open_loop;
pub mod quad;
pub mod verify;

pub use error::{Error, Result};
pub use kernels::KernelSet;
pub use params::{ModelParams, ReducedParams};
