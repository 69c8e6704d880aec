//! Sparse inducing-point GP trained by maximizing a variational lower bound on
//! the exact log marginal likelihood, jointly over hyperparameters and
//! inducing-input locations.

use ndarray::{ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::exact::check_data;
use super::kernel::{clamp_variance, k_unchecked, kernel_matrix, kernel_matrix_sym, Hyperparams};
use crate::numerics::{cholesky, minimize, Matrix, MinimizeOpts, Objective, RngStream, Vector};
use crate::{Error, Result};

/// Log-space standard deviation for hyperparameter restarts, matching the
/// exact fit, and the fraction of the per-dimension data spread used to jitter
/// inducing inputs between restarts.
const INDUCING_JITTER_FRAC: f64 = 0.05;

/// Sparse GP posterior. Only what predictions need survives fitting: the
/// hyperparameters, the inducing inputs m, the mean weights
/// w = σ_n⁻²(K_mm + σ_n⁻²K_mn K_nm)⁻¹K_mn Y, and two Cholesky factors — L_mm
/// of K_mm and L_B of B = I + σ_n⁻²(L_mm⁻¹K_mn)(L_mm⁻¹K_mn)ᵀ. B has
/// eigenvalues ≥ 1, so working through it instead of the raw
/// K_mm + σ_n⁻²K_mn K_nm keeps the variance numerically non-negative even at
/// tiny noise levels. A deserialized model predicts bit-identically without
/// the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseGpModel {
    theta: Hyperparams,
    m: Matrix,
    w: Vector,
    l_mm: crate::numerics::CholeskyFactor,
    l_b: crate::numerics::CholeskyFactor,
    bound: f64,
}

impl SparseGpModel {
    pub fn theta(&self) -> &Hyperparams {
        &self.theta
    }

    pub fn inducing(&self) -> &Matrix {
        &self.m
    }

    pub fn n_inducing(&self) -> usize {
        self.m.nrows()
    }

    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    /// Variational bound value at the fitted parameters.
    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Shared factorizations for the bound, its gradient, and the posterior
/// caches. Everything routes through V = L_mm⁻¹K_mn and B = I + σ_n⁻²VVᵀ: the
/// Woodbury matrix K_mm + σ_n⁻²K_mn K_nm equals L_mm·B·L_mmᵀ, but B stays
/// factorizable (eigenvalues ≥ 1) where the raw product overflows its
/// conditioning at small noise.
struct VfeCore {
    kmm: Matrix,
    kmn: Matrix,
    chol_kmm: crate::numerics::CholeskyFactor,
    chol_b: crate::numerics::CholeskyFactor,
    v: Matrix,
    binv_vy: Vector,
    tr_q: f64,
    value: f64,
}

fn vfe_core(z: &Matrix, y: &Vector, theta: &Hyperparams, m: &Matrix) -> Result<VfeCore> {
    let n = z.nrows();
    let nm = m.nrows();
    let s2 = theta.sigma_n2;
    let kmm = kernel_matrix_sym(m, theta);
    let kmn = kernel_matrix(m, z, theta);
    let chol_kmm = cholesky(&kmm, 0.0)?;
    let v = chol_kmm.forward_mat(&kmn)?;
    let mut b = Matrix::eye(nm);
    b += &v.dot(&v.t()).mapv(|x| x / s2);
    let chol_b = cholesky(&b, 0.0)?;
    let vy = v.dot(y);
    let binv_vy = chol_b.solve_vec(&vy)?;
    // tr(Q) = ‖V‖_F² with Q = K_nm K_mm⁻¹ K_mn.
    let tr_q: f64 = v.iter().map(|x| x * x).sum();
    let tr_knn = n as f64 * theta.sigma_f2;
    let y_qinv_y = y.dot(y) / s2 - vy.dot(&binv_vy) / (s2 * s2);
    // log|Q + σ_n²I| = n·log σ_n² + log|B| by the determinant lemma.
    let log_det_qs = n as f64 * s2.ln() + chol_b.ln_det();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let value = -0.5 * n as f64 * ln2pi
        - 0.5 * log_det_qs
        - 0.5 * y_qinv_y
        - (tr_knn - tr_q) / (2.0 * s2);
    Ok(VfeCore {
        kmm,
        kmn,
        chol_kmm,
        chol_b,
        v,
        binv_vy,
        tr_q,
        value,
    })
}

fn check_inducing(z: &Matrix, theta: &Hyperparams, m: &Matrix) -> Result<()> {
    if m.nrows() == 0 {
        return Err(Error::EmptyInput("need at least one inducing input".into()));
    }
    if m.nrows() > z.nrows() {
        return Err(Error::InvalidArg(format!(
            "{} inducing inputs exceed {} training points",
            m.nrows(),
            z.nrows()
        )));
    }
    if m.ncols() != theta.dim() {
        return Err(Error::DimMismatch(format!(
            "inducing inputs have {} columns, kernel expects {}",
            m.ncols(),
            theta.dim()
        )));
    }
    Ok(())
}

/// Variational lower bound on the exact LML at fixed (Θ, m):
/// log N(Y | 0, Q + σ_n²I) − (1/(2σ_n²))·tr(K_nn − Q), Q = K_nm K_mm⁻¹ K_mn.
pub fn vfe_bound(z: &Matrix, y: &Vector, theta: &Hyperparams, m: &Matrix) -> Result<f64> {
    check_data(z, y, theta)?;
    check_inducing(z, theta, m)?;
    vfe_core(z, y, theta, m).map(|c| c.value)
}

/// Pack optimizer variables as [ln σ_n², ln σ_f², ln ℓ²…, m row-major].
fn pack(theta: &Hyperparams, m: &Matrix) -> Vector {
    let d = theta.dim();
    let mut x = Vector::zeros(2 + d + m.nrows() * d);
    x.slice_mut(ndarray::s![..2 + d]).assign(&theta.to_log_vec());
    for a in 0..m.nrows() {
        for dd in 0..d {
            x[2 + d + a * d + dd] = m[[a, dd]];
        }
    }
    x
}

fn unpack(x: &Vector, d: usize, n_m: usize) -> Result<(Hyperparams, Matrix)> {
    if x.len() != 2 + d + n_m * d {
        return Err(Error::DimMismatch(format!(
            "packed vector has {} entries, want {}",
            x.len(),
            2 + d + n_m * d
        )));
    }
    let theta = Hyperparams::from_log_vec(&x.slice(ndarray::s![..2 + d]).to_owned())?;
    let mut m = Matrix::zeros((n_m, d));
    for a in 0..n_m {
        for dd in 0..d {
            m[[a, dd]] = x[2 + d + a * d + dd];
        }
    }
    Ok((theta, m))
}

/// Bound value and gradient with respect to the packed variables. The matrix
/// derivatives use dF/dK_mn = B·R and dF/dK_mm = −½B·R·Bᵀ with
/// B = K_mm⁻¹K_mn and R = σ_n⁻⁴K_nm A⁻¹K_mn + rrᵀ, r = (Q+σ_n²I)⁻¹Y, which
/// keeps every product at O(n·m²) instead of forming the n×n matrix R.
pub(crate) fn vfe_bound_grad(
    z: &Matrix,
    y: &Vector,
    theta: &Hyperparams,
    m: &Matrix,
) -> Result<(f64, Vector)> {
    check_data(z, y, theta)?;
    check_inducing(z, theta, m)?;
    let core = vfe_core(z, y, theta, m)?;
    let n = z.nrows();
    let nm = m.nrows();
    let d = theta.dim();
    let s2 = theta.sigma_n2;
    let tr_knn = n as f64 * theta.sigma_f2;

    // A⁻¹K_mn Y = L_mm⁻ᵀ·B⁻¹·V·Y, with A = K_mm + σ_n⁻²K_mn K_nm.
    let ainv_kmny = core.chol_kmm.backward_vec(&core.binv_vy)?;
    let r = (y - &core.kmn.t().dot(&ainv_kmny).mapv(|v| v / s2)).mapv(|v| v / s2);
    let b = core.chol_kmm.backward_mat(&core.v)?;
    let w_mat = core.chol_kmm.backward_mat(&core.chol_b.solve_mat(&core.v)?)?;
    let bk = b.dot(&core.kmn.t());
    let br = b.dot(&r);
    let mut g_mn = bk.dot(&w_mat).mapv(|v| v / (s2 * s2));
    for a in 0..nm {
        for j in 0..n {
            g_mn[[a, j]] += br[a] * r[j];
        }
    }
    let mut g_mm = g_mn.dot(&b.t()).mapv(|v| -0.5 * v);
    // Symmetric analytically; enforce it so the inducing chain rule can assume it.
    for i in 0..nm {
        for j in 0..i {
            let s = 0.5 * (g_mm[[i, j]] + g_mm[[j, i]]);
            g_mm[[i, j]] = s;
            g_mm[[j, i]] = s;
        }
    }

    let tr_ainv_cross: f64 = core.kmn.iter().zip(w_mat.iter()).map(|(a, b)| a * b).sum();
    let tr_qs_inv = n as f64 / s2 - tr_ainv_cross / (s2 * s2);
    let df_ds2 = -0.5 * tr_qs_inv + 0.5 * r.dot(&r) + (tr_knn - core.tr_q) / (2.0 * s2 * s2);

    let mut grad = Vector::zeros(2 + d + nm * d);
    grad[0] = s2 * df_ds2;
    let frob_mn: f64 = g_mn.iter().zip(core.kmn.iter()).map(|(a, b)| a * b).sum();
    let frob_mm: f64 = g_mm.iter().zip(core.kmm.iter()).map(|(a, b)| a * b).sum();
    // diag K_nn = σ_f² contributes dF/d(diag K_nn) = −1/(2σ_n²) per entry.
    grad[1] = frob_mn + frob_mm - tr_knn / (2.0 * s2);
    for dd in 0..d {
        let mut acc = 0.0;
        for a in 0..nm {
            for j in 0..n {
                let diff = m[[a, dd]] - z[[j, dd]];
                acc += g_mn[[a, j]] * core.kmn[[a, j]] * diff * diff;
            }
            for bi in 0..nm {
                let diff = m[[a, dd]] - m[[bi, dd]];
                acc += g_mm[[a, bi]] * core.kmm[[a, bi]] * diff * diff;
            }
        }
        grad[2 + dd] = acc / (2.0 * theta.lambda[dd]);
    }
    for a in 0..nm {
        for dd in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += g_mn[[a, j]] * core.kmn[[a, j]] * (z[[j, dd]] - m[[a, dd]]);
            }
            for bi in 0..nm {
                if bi != a {
                    // m_a appears in K_mm[a,b] and K_mm[b,a]; G_mm is symmetric.
                    acc += 2.0 * g_mm[[a, bi]] * core.kmm[[a, bi]] * (m[[bi, dd]] - m[[a, dd]]);
                }
            }
            grad[2 + d + a * d + dd] = acc / theta.lambda[dd];
        }
    }
    Ok((core.value, grad))
}

/// Objective −bound over the packed variables; shared between `fit_sparse` and
/// the bound-tracing tests.
pub(crate) struct VfeObjective<'a> {
    pub z: &'a Matrix,
    pub y: &'a Vector,
    pub n_m: usize,
}

impl Objective for VfeObjective<'_> {
    fn value(&mut self, x: &Vector) -> Result<f64> {
        let (theta, m) = unpack(x, self.z.ncols(), self.n_m)?;
        match vfe_bound(self.z, self.y, &theta, &m) {
            Ok(v) => Ok(-v),
            Err(Error::NotPositiveDefinite { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    fn value_grad(&mut self, x: &Vector) -> Result<(f64, Vector)> {
        let (theta, m) = unpack(x, self.z.ncols(), self.n_m)?;
        let (v, g) = vfe_bound_grad(self.z, self.y, &theta, &m)?;
        Ok((-v, -g))
    }
}

/// Posterior caches for fixed hyperparameters and inducing inputs.
pub fn build_sparse(z: &Matrix, y: &Vector, theta: Hyperparams, m: Matrix) -> Result<SparseGpModel> {
    check_data(z, y, &theta)?;
    check_inducing(z, &theta, &m)?;
    let core = vfe_core(z, y, &theta, &m)?;
    let w = core
        .chol_kmm
        .backward_vec(&core.binv_vy)?
        .mapv(|v| v / theta.sigma_n2);
    Ok(SparseGpModel {
        theta,
        m,
        w,
        l_mm: core.chol_kmm,
        l_b: core.chol_b,
        bound: core.value,
    })
}

/// Greedy farthest-point subset: start from the point farthest from the
/// centroid, then repeatedly add the point with the largest distance to the
/// already-selected set. Deterministic; spreads inducing inputs across
/// clustered trajectory data where random subsets collapse.
pub(crate) fn greedy_farthest_points(z: &Matrix, k: usize) -> Matrix {
    let n = z.nrows();
    assert!(k >= 1 && k <= n, "need 1 <= k = {k} <= n = {n}");
    let mean = z.mean_axis(Axis(0)).expect("n >= 1");
    let dist2 = |i: usize, v: ArrayView1<'_, f64>| -> f64 {
        z.row(i)
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut selected = Vec::with_capacity(k);
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..n {
        let d = dist2(i, mean.view());
        if d > best.1 {
            best = (i, d);
        }
    }
    selected.push(best.0);
    let mut min_d2 = vec![f64::INFINITY; n];
    while selected.len() < k {
        let last = *selected.last().expect("non-empty");
        let mut next = (0, f64::NEG_INFINITY);
        for i in 0..n {
            min_d2[i] = min_d2[i].min(dist2(i, z.row(last)));
            if min_d2[i] > next.1 {
                next = (i, min_d2[i]);
            }
        }
        selected.push(next.0);
    }
    let mut out = Matrix::zeros((k, z.ncols()));
    for (row, &i) in selected.iter().enumerate() {
        out.row_mut(row).assign(&z.row(i));
    }
    out
}

/// Jointly optimize hyperparameters and inducing inputs by multi-start
/// maximization of the variational bound. `n_m` is clamped to the data size
/// with a warning; inducing inputs start at a greedy farthest-point subset.
pub fn fit_sparse(
    z: &Matrix,
    y: &Vector,
    theta0: &Hyperparams,
    n_m: usize,
    restarts: usize,
    rng: &mut RngStream,
) -> Result<SparseGpModel> {
    check_data(z, y, theta0)?;
    if n_m == 0 {
        return Err(Error::InvalidArg("fit_sparse needs n_m >= 1".into()));
    }
    if restarts == 0 {
        return Err(Error::InvalidArg("fit_sparse needs restarts >= 1".into()));
    }
    let n = z.nrows();
    let d = z.ncols();
    let n_m_eff = if n_m > n {
        log::warn!("clamping n_m from {n_m} to the {n} available training points");
        n
    } else {
        n_m
    };
    let m0 = greedy_farthest_points(z, n_m_eff);
    // Per-dimension spread for the restart jitter on inducing inputs.
    let mut spread = vec![0.0f64; d];
    for dd in 0..d {
        let col = z.column(dd);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        spread[dd] = var.sqrt().max(1e-3);
    }
    let mut bounds = Hyperparams::log_bounds(d);
    bounds.extend(std::iter::repeat((f64::NEG_INFINITY, f64::INFINITY)).take(n_m_eff * d));
    let opts = MinimizeOpts::default();
    let x0 = pack(theta0, &m0);
    let mut best: Option<(f64, Vector)> = None;
    for restart in 0..restarts {
        let mut start = x0.clone();
        if restart > 0 {
            for v in start.slice_mut(ndarray::s![..2 + d]).iter_mut() {
                *v += super::exact::RESTART_LOG_STD * rng.normal();
            }
            for a in 0..n_m_eff {
                for dd in 0..d {
                    start[2 + d + a * d + dd] += INDUCING_JITTER_FRAC * spread[dd] * rng.normal();
                }
            }
        }
        let Ok(res) = minimize(&mut VfeObjective { z, y, n_m: n_m_eff }, &start, Some(&bounds), &opts)
        else {
            continue;
        };
        if res.f.is_finite() && best.as_ref().is_none_or(|(bf, _)| res.f < *bf) {
            best = Some((res.f, res.x));
        }
    }
    let Some((_, xbest)) = best else {
        return Err(Error::AllRestartsFailed(restarts));
    };
    let (theta, m) = unpack(&xbest, d, n_m_eff)?;
    build_sparse(z, y, theta, m)
}

/// Posterior mean and variance at one test input:
/// μ = k_mᵀw and σ² = k(z,z) − k_mᵀ(K_mm⁻¹ − (K_mm + σ_n⁻²K_mn K_nm)⁻¹)k_m,
/// evaluated as k(z,z) − ‖v₁‖² + ‖L_B⁻¹v₁‖² with v₁ = L_mm⁻¹k_m so both
/// subtractions stay tiny relative to their operands.
pub fn predict_sparse(model: &SparseGpModel, z: ArrayView1<'_, f64>) -> (f64, f64) {
    assert_eq!(
        z.len(),
        model.dim(),
        "test input has {} dimensions, model expects {}",
        z.len(),
        model.dim()
    );
    let nm = model.n_inducing();
    let mut km = Vector::zeros(nm);
    for a in 0..nm {
        km[a] = k_unchecked(model.m.row(a), z, &model.theta);
    }
    let mu = km.dot(&model.w);
    let v1 = model.l_mm.forward_vec(&km).expect("cached factor matches");
    let v2 = model.l_b.forward_vec(&v1).expect("cached factor matches");
    let var = model.theta.sigma_f2 - v1.dot(&v1) + v2.dot(&v2);
    (mu, clamp_variance(var))
}

/// Analytic gradient of the posterior mean:
/// ∂μ/∂z_d = Σ_a w_a·k(z, m_a)·(m_{a,d} − z_d)/ℓ_d².
pub fn predict_mean_gradient(model: &SparseGpModel, z: ArrayView1<'_, f64>) -> Vector {
    assert_eq!(
        z.len(),
        model.dim(),
        "test input has {} dimensions, model expects {}",
        z.len(),
        model.dim()
    );
    let d = model.dim();
    let mut g = Vector::zeros(d);
    for a in 0..model.n_inducing() {
        let wk = model.w[a] * k_unchecked(model.m.row(a), z, &model.theta);
        for dd in 0..d {
            g[dd] += wk * (model.m[[a, dd]] - z[dd]) / model.theta.lambda[dd];
        }
    }
    g
}
