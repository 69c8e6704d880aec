//! Gaussian-process model-learning MPC for a simulated semi-batch
//! polymerization reactor.
//!
//! The library is organized bottom-up:
//!
//! - [`numerics`]: dense Cholesky solves, box-constrained L-BFGS, the
//!   standard-normal quantile, finite differences, seeded RNG streams.
//! - [`plant`]: the ground-truth reactor ODE simulator (RK4 integration,
//!   measurement noise, constraint monitoring).
//! - [`gp`]: exact and sparse (inducing-point) Gaussian-process regression
//!   with squared-exponential kernels.
//! - [`statespace`]: transition datasets built from closed-loop trajectories,
//!   one GP per state, and moment-matched multi-step rollout.
//! - [`controller`]: the stochastic OCP (single shooting over the control
//!   horizon, chance-constraint penalties) and the receding-horizon MPC law.
//! - [`learner`]: the batch-to-batch loop — PI seed batch, refit, closed-loop
//!   batch, dataset augmentation — and the evaluation metrics.

pub mod controller;
pub mod gp;
pub mod learner;
pub mod numerics;
pub mod plant;
pub mod statespace;
pub mod util;

mod error;
pub use error::{Error, Result};
