//! Equilibrium strategies for time-inconsistent stochastic control.
//!
//! The crate is organised by solver family:
//!
//! - [`model`]: coefficients, the Hamiltonian and its minimizer.
//! - [`oracle`]: closed-form solutions used as ground truth.
//! - [`lq`]: the Riccati–Volterra system for linear-quadratic problems.
//! - [`merton`]: the consumption–investment equilibrium integral equation.
//! - [`hjbgrid`]: finite differences for the equilibrium HJB equation in one space dimension.
//! - [`mcsim`]: Monte Carlo simulation, cost estimation and deviation tests.

pub mod error;
pub mod grid;
pub mod hjbgrid;
pub mod lq;
pub mod mcsim;
pub mod merton;
pub mod model;
pub mod oracle;
pub mod quad;

pub use error::{Error, Result};
pub use grid::{SpatialGrid1D, TimeGrid, TriangularGrid};
