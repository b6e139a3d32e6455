//! Gibbs posteriors within tasks, Gibbs and variational hyper-posteriors over
//! priors, closed-form excess-risk bounds, and a deterministic Monte-Carlo
//! harness for measuring fast-rate vs slow-rate behaviour of meta-learning on
//! synthetic task environments.
//!
//! Layout:
//! - [`numerics`]: special functions, stable aggregation, quadrature oracles.
//! - [`rng`]: labelled, counter-based random streams.
//! - [`divergences`]: closed-form KL divergences for every family used here.
//! - [`environments`]: bounded losses and synthetic task environments with
//!   analytically known risks.
//! - [`within_task`]: exact Gibbs posteriors on finite parameter sets and
//!   variational approximations over diagonal Gaussians and Dirac masses.
//! - [`meta_level`]: hyper-posteriors over priors (finite, subset, Gaussian
//!   and mixture families).
//! - [`bounds`]: evaluators for the theoretical excess-risk bounds.
//! - [`bernstein`]: empirical checks of the variance/excess inequalities.
//! - [`experiments`]: sweep runner, rate fitting and result emission.

pub mod bernstein;
pub mod bounds;
pub mod divergences;
pub mod environments;
pub mod error;
pub mod experiments;
pub mod meta_level;
pub mod numerics;
pub mod rng;
pub mod within_task;

pub use error::{Error, Result};
pub use rng::RandomStream;
