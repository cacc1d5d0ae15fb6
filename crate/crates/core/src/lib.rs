//! Survey calibration by entropy-penalized weight adjustment.
//!
//! The crate adjusts design weights of a probability sample so that the
//! weighted auxiliary means hit known population values, keeping the new
//! weights as close as possible to the design weights in a divergence
//! induced by a chosen prior family. The dual of that program is a smooth
//! unconstrained problem in one multiplier per constraint, solved here by a
//! damped Newton method.
//!
//! Modules:
//! - [`design`]: populations, inclusion probabilities, sample containers,
//!   Horvitz-Thompson estimators, small-population enumeration.
//! - [`priors`]: prior families (Gaussian, exponential, Poisson, custom),
//!   their log-Laplace transforms and convex conjugates.
//! - [`calibrate`]: the calibration problem, dual solver, closed-form
//!   regression estimator, and feasibility diagnostics.
//! - [`instruments`]: instrument-based estimators generalizing calibration,
//!   including the design-optimal instrument under uniform sampling.
//! - [`efficiency`]: variance lower bounds and quadratic risk for
//!   linearized estimators.
//! - [`amem`]: approximate-projection estimators built on a basis expansion
//!   of a working predictor.
//! - [`harness`]: reproducible Monte Carlo comparisons of the estimators.

pub mod amem;
pub mod calibrate;
pub mod design;
pub mod efficiency;
pub mod error;
pub mod harness;
pub mod instruments;
pub mod priors;
pub mod rng;
mod simplex;

pub use error::{Error, Result};

// Matrix types appear throughout the public API; re-export the crate so
// callers stay on the same version.
pub use nalgebra;
