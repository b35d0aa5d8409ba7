//! Numerical laboratory for two-player zero-sum stochastic differential games
//! whose payoff is given by a backward SDE.
//!
//! The crate is split along the pipeline: [`model`] holds the game
//! coefficients and Hamiltonians, [`sde_sim`] the forward simulation,
//! [`bsde`] the backward solvers, [`dpp`] the dynamic-programming value
//! functions, [`pde`] the finite-difference Isaacs solver and [`certify`] the
//! localization checks around a test function.

pub mod error;
pub mod model;
pub mod sde_sim;
pub mod bsde;
pub mod dpp;
pub mod pde;
pub mod certify;
pub mod games;
pub(crate) mod stats;

pub use error::{LabError, Result};

/// First line of every CSV file the lab writes.
pub const FORMAT_HEADER: &str = "#isaacs-lab-v1";
