//! Wasserstein contraction laboratory for Euler chains and particle systems.
//!
//! The crate builds the radial weight function κ for a certified drift,
//! evaluates every threshold and rate that comes with it, simulates coupled
//! chains with replayable noise, solves exact optimal transport between
//! point clouds, and checks the resulting inequalities numerically.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod bounds;
pub mod constants;
pub mod drift;
pub mod error;
pub mod kappa;
pub mod presets;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod sim;
pub mod transport;

pub use error::{Error, Result};
