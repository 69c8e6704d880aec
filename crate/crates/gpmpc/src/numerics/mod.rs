//! Shared numerical kernels: dense Cholesky factorization and solves,
//! box-constrained limited-memory BFGS, the standard-normal CDF/quantile,
//! central finite differences, and seeded random streams.

mod linalg;
mod optimize;
mod rng;
mod special;

pub use linalg::{cholesky, solve_psd, CholeskyFactor};
pub use optimize::{minimize, FnObjective, MinimizeOpts, MinimizeResult, Objective};
pub use rng::RngStream;
pub use special::{std_normal_cdf, std_normal_quantile};

use crate::{Error, Result};

/// Dense row-major matrix of `f64`.
pub type Matrix = ndarray::Array2<f64>;
/// Dense vector of `f64`.
pub type Vector = ndarray::Array1<f64>;

/// Central-difference gradient of `f` at `x` with step `h` per component.
///
/// Used to validate analytic gradients; not meant for production gradients.
pub fn fd_gradient<F>(mut f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArg(format!("fd step must be > 0, got {h}")));
    }
    let mut g = Vector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        let gi = (fp - fm) / (2.0 * h);
        if !gi.is_finite() {
            return Err(Error::NonFinite(format!("fd_gradient component {i}")));
        }
        g[i] = gi;
    }
    Ok(g)
}
