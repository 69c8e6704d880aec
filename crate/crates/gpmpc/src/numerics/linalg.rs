//! Dense Cholesky factorization with jitter escalation, and triangular solves.

use super::{Matrix, Vector};
use crate::{Error, Result};

/// Lower-triangular Cholesky factor of `A + jitter·I`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CholeskyFactor {
    l: Matrix,
    /// Diagonal jitter that was actually added before factorization succeeded.
    pub jitter: f64,
}

/// Factor a symmetric positive-definite matrix as `L·Lᵀ = A + jitter·I`.
///
/// If the factorization fails at the requested jitter, the jitter is escalated
/// ×10 per attempt up to `1e-4·trace(A)/n`; only then is the matrix declared
/// not positive definite. Kernel Gram matrices at clustered trajectory data
/// are routinely near-singular, so this failover is load-bearing, not cosmetic.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if jitter < 0.0 {
        return Err(Error::InvalidArg(format!("jitter must be >= 0, got {jitter}")));
    }

    // Symmetry to tolerance, relative to the largest entry.
    let mut max_abs = 0.0f64;
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in 0..=i {
            max_abs = max_abs.max(a[(i, j)].abs());
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > 1e-8 * max_abs.max(1.0) {
        return Err(Error::NotSymmetric { max_asym });
    }

    let trace: f64 = (0..n).map(|i| a[(i, i)]).sum();
    let scale = (trace / n as f64).max(f64::MIN_POSITIVE);
    let cap = 1e-4 * scale;

    let mut jit = jitter;
    loop {
        if let Some(l) = try_factor(a, jit) {
            return Ok(CholeskyFactor { l, jitter: jit });
        }
        let next = if jit == 0.0 { 1e-12 * scale } else { jit * 10.0 };
        if next > cap || !next.is_finite() {
            return Err(Error::NotPositiveDefinite { last_jitter: jit });
        }
        jit = next;
    }
}

/// One unpivoted Cholesky attempt; `None` on a non-positive or non-finite pivot.
fn try_factor(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.nrows();
    let mut l = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

impl CholeskyFactor {
    /// The lower-triangular factor L.
    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// log|A + jitter·I| = 2·Σ log L_ii.
    pub fn ln_det(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * self.l[(i, i)].ln()).sum()
    }

    /// Solve L·y = b (forward substitution).
    pub fn forward_vec(&self, b: &Vector) -> Result<Vector> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimMismatch(format!(
                "forward solve: factor is {n}x{n}, rhs has {} rows",
                b.len()
            )));
        }
        let mut y = b.clone();
        for i in 0..n {
            for k in 0..i {
                let t = self.l[(i, k)] * y[k];
                y[i] -= t;
            }
            y[i] /= self.l[(i, i)];
        }
        Ok(y)
    }

    /// Solve Lᵀ·x = y (back substitution).
    pub fn backward_vec(&self, y: &Vector) -> Result<Vector> {
        let n = self.dim();
        if y.len() != n {
            return Err(Error::DimMismatch(format!(
                "backward solve: factor is {n}x{n}, rhs has {} rows",
                y.len()
            )));
        }
        let mut x = y.clone();
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let t = self.l[(k, i)] * x[k];
                x[i] -= t;
            }
            x[i] /= self.l[(i, i)];
        }
        Ok(x)
    }

    /// Solve (L·Lᵀ)·x = b.
    pub fn solve_vec(&self, b: &Vector) -> Result<Vector> {
        self.backward_vec(&self.forward_vec(b)?)
    }

    /// Solve L·Y = B column-wise.
    pub fn forward_mat(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.nrows() != n {
            return Err(Error::DimMismatch(format!(
                "forward solve: factor is {n}x{n}, rhs has {} rows",
                b.nrows()
            )));
        }
        let mut y = b.clone();
        for c in 0..b.ncols() {
            for i in 0..n {
                for k in 0..i {
                    let t = self.l[(i, k)] * y[(k, c)];
                    y[(i, c)] -= t;
                }
                y[(i, c)] /= self.l[(i, i)];
            }
        }
        Ok(y)
    }

    /// Solve Lᵀ·X = Y column-wise.
    pub fn backward_mat(&self, y: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if y.nrows() != n {
            return Err(Error::DimMismatch(format!(
                "backward solve: factor is {n}x{n}, rhs has {} rows",
                y.nrows()
            )));
        }
        let mut x = y.clone();
        for c in 0..x.ncols() {
            for i in (0..n).rev() {
                for k in (i + 1)..n {
                    let t = self.l[(k, i)] * x[(k, c)];
                    x[(i, c)] -= t;
                }
                x[(i, c)] /= self.l[(i, i)];
            }
        }
        Ok(x)
    }

    /// Solve (L·Lᵀ)·X = B column-wise.
    pub fn solve_mat(&self, b: &Matrix) -> Result<Matrix> {
        self.backward_mat(&self.forward_mat(b)?)
    }
}

/// Solve (L·Lᵀ)·X = B for a matrix right-hand side.
pub fn solve_psd(factor: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    factor.solve_mat(b)
}
