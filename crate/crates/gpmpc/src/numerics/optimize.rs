//! Box-constrained limited-memory BFGS with a backtracking Armijo line search.
//!
//! Every smooth problem in this crate (kernel hyperparameter training, the
//! single-shooting OCP) is either unconstrained or box-constrained, so a
//! projected quasi-Newton method is all that is needed: no general NLP solver.

use super::Vector;
use crate::{Error, Result};

/// A smooth objective. `value` may be much cheaper than `value_grad`
/// (e.g. a finite-difference gradient); the line search only calls `value`.
pub trait Objective {
    fn value(&mut self, x: &Vector) -> Result<f64>;
    fn value_grad(&mut self, x: &Vector) -> Result<(f64, Vector)>;
}

/// Adapter turning a closure that returns (value, gradient) into an [`Objective`].
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&Vector) -> Result<(f64, Vector)>,
{
    fn value(&mut self, x: &Vector) -> Result<f64> {
        Ok((self.0)(x)?.0)
    }
    fn value_grad(&mut self, x: &Vector) -> Result<(f64, Vector)> {
        (self.0)(x)
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeOpts {
    /// Convergence: ‖proj(x − g) − x‖∞ ≤ tol.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of (s, y) curvature pairs retained.
    pub memory: usize,
    /// Record each accepted iterate in [`MinimizeResult::trace`].
    pub keep_trace: bool,
}

impl Default for MinimizeOpts {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            memory: 8,
            keep_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vector,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted iterates (x, f), including the start point; empty unless
    /// `keep_trace` was set.
    pub trace: Vec<(Vector, f64)>,
}

fn project(x: &mut Vector, bounds: Option<&[(f64, f64)]>) {
    if let Some(bs) = bounds {
        for (xi, &(lo, hi)) in x.iter_mut().zip(bs.iter()) {
            *xi = xi.clamp(lo, hi);
        }
    }
}

/// ∞-norm of the projected gradient step, the stationarity measure.
fn projected_gradient_norm(x: &Vector, g: &Vector, bounds: Option<&[(f64, f64)]>) -> f64 {
    let mut step = x - g;
    project(&mut step, bounds);
    (&step - x).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimize `obj` from `x0`, optionally inside a box.
///
/// Backtracking Armijo line search on the projected path; accepted objective
/// values are non-increasing. Bounds are honored exactly (projection, not
/// penalty). Curvature pairs with sᵀy ≤ 0 are skipped.
pub fn minimize<O: Objective>(
    obj: &mut O,
    x0: &Vector,
    bounds: Option<&[(f64, f64)]>,
    opts: &MinimizeOpts,
) -> Result<MinimizeResult> {
    if let Some(bs) = bounds {
        if bs.len() != x0.len() {
            return Err(Error::DimMismatch(format!(
                "bounds length {} vs x0 length {}",
                bs.len(),
                x0.len()
            )));
        }
        for (i, &(lo, hi)) in bs.iter().enumerate() {
            if lo > hi {
                return Err(Error::InvalidArg(format!("bounds[{i}]: lo {lo} > hi {hi}")));
            }
        }
    }

    let mut x = x0.clone();
    project(&mut x, bounds);
    let (mut f, mut g) = obj.value_grad(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }

    let mut trace = Vec::new();
    if opts.keep_trace {
        trace.push((x.clone(), f));
    }

    // (s, y) curvature-pair history, newest last.
    let mut svecs: Vec<Vector> = Vec::new();
    let mut yvecs: Vec<Vector> = Vec::new();

    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        if projected_gradient_norm(&x, &g, bounds) <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Freeze coordinates pinned at a bound with the gradient pushing out.
        let mut active = vec![false; x.len()];
        if let Some(bs) = bounds {
            for i in 0..x.len() {
                let (lo, hi) = bs[i];
                active[i] = (x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0);
            }
        }
        let mut gm = g.clone();
        for i in 0..gm.len() {
            if active[i] {
                gm[i] = 0.0;
            }
        }

        let mut d = -two_loop(&gm, &svecs, &yvecs);
        for i in 0..d.len() {
            if active[i] {
                d[i] = 0.0;
            }
        }
        // Fall back to steepest descent if the quasi-Newton direction is not
        // a descent direction (can happen right after an active-set change).
        let dg = d.dot(&g);
        if !(dg < 0.0) {
            d = -&gm;
            if d.dot(&g) >= 0.0 {
                // Only active coordinates remain: projected-stationary.
                converged = true;
                break;
            }
        }

        // Backtracking Armijo on the projected path.
        let mut alpha = if svecs.is_empty() {
            let dinf = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (1.0 / dinf.max(1.0)).min(1.0)
        } else {
            1.0
        };
        const C1: f64 = 1e-4;
        const ALPHA_FLOOR: f64 = 1e-20;
        let mut accepted = None;
        loop {
            let mut xt = &x + &(alpha * &d);
            project(&mut xt, bounds);
            let ft = obj.value(&xt)?;
            let pred = g.dot(&(&xt - &x));
            if ft.is_finite() && ft <= f + C1 * pred && pred < 0.0 {
                accepted = Some((xt, ft));
                break;
            }
            alpha *= 0.5;
            if alpha < ALPHA_FLOOR {
                if !ft.is_finite() {
                    return Err(Error::NonFiniteObjective);
                }
                break;
            }
        }

        let Some((xt, _)) = accepted else {
            // Finite objective but no acceptable decrease: stop at x.
            break;
        };

        let (ft, gt) = obj.value_grad(&xt)?;
        if !ft.is_finite() || gt.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        let s = &xt - &x;
        let yv = &gt - &g;
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.dot(&s).sqrt() * yv.dot(&yv).sqrt() {
            svecs.push(s);
            yvecs.push(yv);
            if svecs.len() > opts.memory {
                svecs.remove(0);
                yvecs.remove(0);
            }
        }
        x = xt;
        f = ft;
        g = gt;
        if opts.keep_trace {
            trace.push((x.clone(), f));
        }
    }

    if !converged && projected_gradient_norm(&x, &g, bounds) <= opts.tol {
        converged = true;
    }

    Ok(MinimizeResult {
        x,
        f,
        iterations,
        converged,
        trace,
    })
}

/// Two-loop recursion: returns H·g for the implicit inverse-Hessian estimate.
fn two_loop(g: &Vector, svecs: &[Vector], yvecs: &[Vector]) -> Vector {
    let k = svecs.len();
    if k == 0 {
        return g.clone();
    }
    let mut q = g.clone();
    let mut alphas = vec![0.0; k];
    let mut rhos = vec![0.0; k];
    for i in (0..k).rev() {
        rhos[i] = 1.0 / yvecs[i].dot(&svecs[i]);
        alphas[i] = rhos[i] * svecs[i].dot(&q);
        q = &q - &(alphas[i] * &yvecs[i]);
    }
    let last = k - 1;
    let gamma = svecs[last].dot(&yvecs[last]) / yvecs[last].dot(&yvecs[last]);
    q *= gamma;
    for i in 0..k {
        let beta = rhos[i] * yvecs[i].dot(&q);
        q = &q + &((alphas[i] - beta) * &svecs[i]);
    }
    q
}
