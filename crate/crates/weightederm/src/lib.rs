//! Change point estimation in high-dimensional generalized linear models via
//! sample-weighted empirical risk minimization.
//!
//! The method fits `L` weighted convex regressions to the same data, where the
//! per-sample weights are the marginal prior probabilities that sample `i` was
//! generated by signal `ell` under a prior on change point configurations. The
//! fitted linear predictors are then segmented to locate the change points.
//!
//! Alongside the estimator, the crate solves the low-dimensional fixed-point
//! system that characterizes the estimator's joint asymptotic distribution in
//! the proportional regime `n/p -> delta > 1`, and uses that characterization
//! to build a posterior distribution over change point locations.
//!
//! Module map:
//! - [`data`]: datasets, signal configurations, change point vectors, GLM links,
//!   the Hausdorff metric.
//! - [`loss`]: base losses (squared, Huber, logistic) with the derivatives and
//!   scalar proximal operators the theory needs.
//! - [`weights`]: change point priors and their per-sample marginal weights.
//! - [`solver`]: the weighted ERM fits.
//! - [`segmentation`]: exhaustive and greedy change point search, CV order
//!   selection.
//! - [`state_evolution`]: the fixed-point solver and theoretical performance
//!   predictions.
//! - [`inference`]: adjusted estimates, configuration likelihoods, posteriors,
//!   and signal-strength estimation.
//! - [`harness`]: synthetic scenarios, experiment orchestration, reports.

pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
mod linalg;
pub mod loss;
pub mod rng;
pub mod segmentation;
pub mod solver;
pub mod state_evolution;
pub mod weights;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
