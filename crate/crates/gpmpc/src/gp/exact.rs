//! Exact Gaussian-process regression trained by maximizing the log marginal
//! likelihood in hyperparameter log-space.

use ndarray::{Array2, ArrayView1};

use super::kernel::{clamp_variance, k_unchecked, kernel_matrix_sym, Hyperparams};
use crate::numerics::{
    cholesky, minimize, solve_psd, CholeskyFactor, Matrix, MinimizeOpts, Objective, RngStream,
    Vector,
};
use crate::{Error, Result};

/// Log-space standard deviation of the seeded restart perturbations.
pub(crate) const RESTART_LOG_STD: f64 = 1.0;

/// Exact GP posterior over one scalar target. Holds the training data plus a
/// cached Cholesky factor of K + σ_n²I and the weight vector (K + σ_n²I)⁻¹Y so
/// predictions cost O(n) mean / O(n²) variance.
#[derive(Debug, Clone)]
pub struct GpModel {
    theta: Hyperparams,
    z: Matrix,
    y: Vector,
    chol: CholeskyFactor,
    alpha: Vector,
    lml: f64,
}

impl GpModel {
    /// Build the posterior caches for fixed hyperparameters.
    pub fn from_data(z: Matrix, y: Vector, theta: Hyperparams) -> Result<Self> {
        check_data(&z, &y, &theta)?;
        let (chol, alpha, lml) = posterior_caches(&z, &y, &theta)?;
        Ok(Self {
            theta,
            z,
            y,
            chol,
            alpha,
            lml,
        })
    }

    pub fn theta(&self) -> &Hyperparams {
        &self.theta
    }

    /// Log marginal likelihood of the training data under the stored Θ.
    pub fn lml(&self) -> f64 {
        self.lml
    }

    pub fn n_data(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.z
    }

    pub fn targets(&self) -> &Vector {
        &self.y
    }
}

pub(crate) fn check_data(z: &Matrix, y: &Vector, theta: &Hyperparams) -> Result<()> {
    if z.nrows() == 0 {
        return Err(Error::EmptyInput("GP training needs at least one datum".into()));
    }
    if y.len() != z.nrows() {
        return Err(Error::DimMismatch(format!(
            "{} training inputs but {} targets",
            z.nrows(),
            y.len()
        )));
    }
    if z.ncols() != theta.dim() {
        return Err(Error::DimMismatch(format!(
            "{}-dimensional inputs but {} length scales",
            z.ncols(),
            theta.dim()
        )));
    }
    theta.validate()
}

/// Cholesky of K + σ_n²I, the weight vector α = (K + σ_n²I)⁻¹Y, and the LML.
fn posterior_caches(z: &Matrix, y: &Vector, theta: &Hyperparams) -> Result<(CholeskyFactor, Vector, f64)> {
    let n = z.nrows();
    let mut ky = kernel_matrix_sym(z, theta);
    for i in 0..n {
        ky[[i, i]] += theta.sigma_n2;
    }
    let chol = cholesky(&ky, 0.0)?;
    let alpha = chol.solve_vec(y)?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * chol.ln_det() - 0.5 * n as f64 * ln2pi;
    Ok((chol, alpha, lml))
}

/// LML value only; used in line searches where the gradient would be wasted.
fn lml_value(z: &Matrix, y: &Vector, theta: &Hyperparams) -> Result<f64> {
    posterior_caches(z, y, theta).map(|(_, _, v)| v)
}

/// −½Yᵀ(K+σ_n²I)⁻¹Y − ½log|K+σ_n²I| − (n/2)log 2π, together with its gradient
/// with respect to the log-space packing [ln σ_n², ln σ_f², ln ℓ₁²…]. The
/// gradient uses the trace identity ∂LML/∂θ = ½tr((ααᵀ − K_y⁻¹)·∂K_y/∂θ).
pub fn log_marginal_likelihood(z: &Matrix, y: &Vector, theta: &Hyperparams) -> Result<(f64, Vector)> {
    check_data(z, y, theta)?;
    let n = z.nrows();
    let d = theta.dim();
    let k = kernel_matrix_sym(z, theta);
    let mut ky = k.clone();
    for i in 0..n {
        ky[[i, i]] += theta.sigma_n2;
    }
    let chol = cholesky(&ky, 0.0)?;
    let alpha = chol.solve_vec(y)?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let value = -0.5 * y.dot(&alpha) - 0.5 * chol.ln_det() - 0.5 * n as f64 * ln2pi;

    let ky_inv = solve_psd(&chol, &Array2::eye(n))?;
    let mut tr_a = 0.0;
    let mut sum_ak = 0.0;
    let mut sum_akd = vec![0.0; d];
    for i in 0..n {
        for j in 0..n {
            let aij = alpha[i] * alpha[j] - ky_inv[[i, j]];
            if i == j {
                tr_a += aij;
            }
            let kij = k[[i, j]];
            sum_ak += aij * kij;
            for dd in 0..d {
                let diff = z[[i, dd]] - z[[j, dd]];
                sum_akd[dd] += aij * kij * diff * diff;
            }
        }
    }
    let mut grad = Vector::zeros(2 + d);
    // ∂K_y/∂ln σ_n² = σ_n²I; ∂K_y/∂ln σ_f² = K; ∂K_y/∂ln ℓ_d² = K⊙Δ_d²/(2ℓ_d²).
    grad[0] = 0.5 * theta.sigma_n2 * tr_a;
    grad[1] = 0.5 * sum_ak;
    for dd in 0..d {
        grad[2 + dd] = 0.5 * sum_akd[dd] / (2.0 * theta.lambda[dd]);
    }
    Ok((value, grad))
}

struct NegLml<'a> {
    z: &'a Matrix,
    y: &'a Vector,
}

impl Objective for NegLml<'_> {
    fn value(&mut self, x: &Vector) -> Result<f64> {
        let theta = Hyperparams::from_log_vec(x)?;
        match lml_value(self.z, self.y, &theta) {
            Ok(v) => Ok(-v),
            // An unfactorizable trial point makes the line search back off
            // rather than aborting the whole fit.
            Err(Error::NotPositiveDefinite { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    fn value_grad(&mut self, x: &Vector) -> Result<(f64, Vector)> {
        let theta = Hyperparams::from_log_vec(x)?;
        let (v, g) = log_marginal_likelihood(self.z, self.y, &theta)?;
        Ok((-v, -g))
    }
}

/// Maximize the LML over hyperparameters with multi-start: Θ₀ itself plus
/// `restarts − 1` seeded log-normal perturbations of it. Returns the model at
/// the best optimum; errors with `AllRestartsFailed` only if every start dies.
pub fn fit_exact(
    z: &Matrix,
    y: &Vector,
    theta0: &Hyperparams,
    restarts: usize,
    rng: &mut RngStream,
) -> Result<GpModel> {
    check_data(z, y, theta0)?;
    if restarts == 0 {
        return Err(Error::InvalidArg("fit_exact needs restarts >= 1".into()));
    }
    let bounds = Hyperparams::log_bounds(theta0.dim());
    let x0 = theta0.to_log_vec();
    let opts = MinimizeOpts::default();
    let mut best: Option<(f64, Vector)> = None;
    for r in 0..restarts {
        let mut start = x0.clone();
        if r > 0 {
            for v in start.iter_mut() {
                *v += RESTART_LOG_STD * rng.normal();
            }
        }
        let Ok(res) = minimize(&mut NegLml { z, y }, &start, Some(&bounds), &opts) else {
            continue;
        };
        if res.f.is_finite() && best.as_ref().is_none_or(|(bf, _)| res.f < *bf) {
            best = Some((res.f, res.x));
        }
    }
    let Some((_, xbest)) = best else {
        return Err(Error::AllRestartsFailed(restarts));
    };
    GpModel::from_data(z.clone(), y.clone(), Hyperparams::from_log_vec(&xbest)?)
}

/// Posterior mean and variance at one test input:
/// μ = kᵀ(K+σ_n²I)⁻¹Y and σ² = k(z,z) − kᵀ(K+σ_n²I)⁻¹k.
pub fn predict_exact(model: &GpModel, z: ArrayView1<'_, f64>) -> (f64, f64) {
    assert_eq!(
        z.len(),
        model.dim(),
        "test input has {} dimensions, model expects {}",
        z.len(),
        model.dim()
    );
    let n = model.n_data();
    let mut kv = Vector::zeros(n);
    for i in 0..n {
        kv[i] = k_unchecked(model.z.row(i), z, &model.theta);
    }
    let mu = kv.dot(&model.alpha);
    let v = model
        .chol
        .forward_vec(&kv)
        .expect("cached factor matches training size");
    let var = model.theta.sigma_f2 - v.dot(&v);
    (mu, clamp_variance(var))
}
