//! Gaussian-process regression: an exact posterior for small datasets and a
//! sparse inducing-point approximation whose hyperparameters and pseudo-inputs
//! are trained jointly on a variational lower bound.

pub(crate) mod exact;
mod kernel;
mod sparse;

pub use exact::{fit_exact, log_marginal_likelihood, predict_exact, GpModel};
pub use kernel::{se_kernel, Hyperparams, MIN_LAMBDA, MIN_SIGMA_F2, MIN_SIGMA_N2};
pub use sparse::{
    build_sparse, fit_sparse, predict_mean_gradient, predict_sparse, vfe_bound, SparseGpModel,
};
