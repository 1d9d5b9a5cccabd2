//! Sharp lower bounds for weighted `L^p` norms of multivariate functions with
//! prescribed one-dimensional marginals, on tensor grids.

pub mod cli;
pub mod counterexamples;
pub mod densities;
pub mod error;
pub mod expr;
pub mod format;
pub mod grid;
pub mod json;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{Axis, GridSpec, MarginalSet, ScalarField, Scheme};
