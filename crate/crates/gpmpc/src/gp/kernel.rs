//! Squared-exponential covariance with per-dimension length scales.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, Vector};
use crate::{Error, Result};

/// Lower bound on the noise variance during optimization; keeps the noisy
/// covariance matrix invertible even on duplicated inputs.
pub const MIN_SIGMA_N2: f64 = 1e-8;
/// Lower bound on each squared length scale during optimization.
pub const MIN_LAMBDA: f64 = 1e-6;
/// Lower bound on the signal variance during optimization; only guards against
/// a degenerate all-noise model.
pub const MIN_SIGMA_F2: f64 = 1e-10;

const MAX_SIGMA_N2: f64 = 1e10;
const MAX_SIGMA_F2: f64 = 1e10;
const MAX_LAMBDA: f64 = 1e12;

/// Kernel hyperparameters: noise variance σ_n², signal variance σ_f² and one
/// squared length scale per input dimension. All strictly positive; training
/// works on the log-space packing of [`Hyperparams::to_log_vec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma_n2: f64,
    pub sigma_f2: f64,
    /// Squared length scales ℓ_d², one per input dimension.
    pub lambda: Vec<f64>,
}

impl Hyperparams {
    pub fn new(sigma_n2: f64, sigma_f2: f64, lambda: Vec<f64>) -> Result<Self> {
        let theta = Self {
            sigma_n2,
            sigma_f2,
            lambda,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// Same squared length scale in every input dimension.
    pub fn isotropic(sigma_n2: f64, sigma_f2: f64, l2: f64, dim: usize) -> Result<Self> {
        Self::new(sigma_n2, sigma_f2, vec![l2; dim])
    }

    /// Number of input dimensions the kernel accepts.
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() {
            return Err(Error::InvalidArg("hyperparameters need ≥ 1 length scale".into()));
        }
        for (name, v) in [("sigma_n2", self.sigma_n2), ("sigma_f2", self.sigma_f2)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidArg(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for (d, &l2) in self.lambda.iter().enumerate() {
            if !l2.is_finite() || l2 <= 0.0 {
                return Err(Error::InvalidArg(format!(
                    "lambda[{d}] must be finite and > 0, got {l2}"
                )));
            }
        }
        Ok(())
    }

    /// Log-space packing `[ln σ_n², ln σ_f², ln ℓ₁², …, ln ℓ_d²]` used by the
    /// optimizer; [`Hyperparams::from_log_vec`] inverts it.
    pub fn to_log_vec(&self) -> Vector {
        let mut x = Vector::zeros(2 + self.lambda.len());
        x[0] = self.sigma_n2.ln();
        x[1] = self.sigma_f2.ln();
        for (d, &l2) in self.lambda.iter().enumerate() {
            x[2 + d] = l2.ln();
        }
        x
    }

    pub fn from_log_vec(x: &Vector) -> Result<Self> {
        if x.len() < 3 {
            return Err(Error::DimMismatch(format!(
                "log hyperparameter vector needs ≥ 3 entries, got {}",
                x.len()
            )));
        }
        Self::new(x[0].exp(), x[1].exp(), x.iter().skip(2).map(|v| v.exp()).collect())
    }

    /// Box bounds for the log-space packing. Lower bounds are the documented
    /// floors; upper bounds are generous and only stop runaway iterates.
    pub fn log_bounds(dim: usize) -> Vec<(f64, f64)> {
        let mut b = vec![
            (MIN_SIGMA_N2.ln(), MAX_SIGMA_N2.ln()),
            (MIN_SIGMA_F2.ln(), MAX_SIGMA_F2.ln()),
        ];
        b.extend(std::iter::repeat((MIN_LAMBDA.ln(), MAX_LAMBDA.ln())).take(dim));
        b
    }
}

/// σ_f²·exp(−½ Σ_d (z_i,d − z_j,d)²/ℓ_d²).
pub fn se_kernel(zi: ArrayView1<'_, f64>, zj: ArrayView1<'_, f64>, theta: &Hyperparams) -> Result<f64> {
    if zi.len() != zj.len() || zi.len() != theta.dim() {
        return Err(Error::DimMismatch(format!(
            "se_kernel: inputs of length {} and {} against {} length scales",
            zi.len(),
            zj.len(),
            theta.dim()
        )));
    }
    Ok(k_unchecked(zi, zj, theta))
}

pub(crate) fn k_unchecked(zi: ArrayView1<'_, f64>, zj: ArrayView1<'_, f64>, theta: &Hyperparams) -> f64 {
    debug_assert_eq!(zi.len(), theta.dim());
    debug_assert_eq!(zj.len(), theta.dim());
    let mut q = 0.0;
    for d in 0..zi.len() {
        let diff = zi[d] - zj[d];
        q += diff * diff / theta.lambda[d];
    }
    theta.sigma_f2 * (-0.5 * q).exp()
}

/// Cross-covariance matrix with `a.nrows() × b.nrows()` entries, rows indexing `a`.
pub(crate) fn kernel_matrix(a: &Matrix, b: &Matrix, theta: &Hyperparams) -> Matrix {
    let mut k = Matrix::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            k[[i, j]] = k_unchecked(a.row(i), b.row(j), theta);
        }
    }
    k
}

/// Symmetric covariance of one input set; the diagonal is exactly σ_f².
pub(crate) fn kernel_matrix_sym(a: &Matrix, theta: &Hyperparams) -> Matrix {
    let n = a.nrows();
    let mut k = Matrix::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = theta.sigma_f2;
        for j in 0..i {
            let v = k_unchecked(a.row(i), a.row(j), theta);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Clamp tiny negative predictive variances produced by roundoff. Anything
/// below the −1e-10 floor means a broken factorization and is a hard error.
pub(crate) fn clamp_variance(v: f64) -> f64 {
    assert!(v >= -1e-10, "predictive variance {v} below the -1e-10 clamp floor");
    v.max(0.0)
}
