//! Delay-robust feedback for pairs of coupled agents.
//!
//! Simulates time-delay systems, builds the affine constraint
//! approximation of the delayed coupling, solves the delay game on a grid
//! and extracts and verifies the resulting feedback.

pub mod affine_approx;
pub mod analysis;
pub mod dde_sim;
pub mod error;
pub mod harness;
pub mod hji;
pub mod models;
pub mod policy;

pub use error::{Error, Result};
