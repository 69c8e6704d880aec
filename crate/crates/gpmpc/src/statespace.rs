//! State-transition learning: turns closed-loop trajectories into a
//! standardized regression dataset, fits one sparse GP per state, and
//! propagates Gaussian state beliefs through the learned dynamics with a
//! first-order variance expansion.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::gp::{
    fit_sparse, predict_mean_gradient, predict_sparse, Hyperparams, SparseGpModel,
};
use crate::numerics::{Matrix, RngStream, Vector};
use crate::util::write_atomic;
use crate::{Error, Result};

/// Default hyperparameter start for standardized data: unit signal, unit
/// length scale, and a noise floor matching mild measurement noise.
fn default_theta0(dim: usize) -> Hyperparams {
    Hyperparams::isotropic(0.01, 1.0, 1.0, dim).expect("static hyperparameters are valid")
}

/// Per-column affine standardization. Columns with (numerically) zero spread
/// keep std = 1 so constant inputs pass through as zeros instead of NaN.
///
/// Control columns the data never moved need more care than that: the scale
/// of a constant column is arbitrary, and whatever scale it gets becomes the
/// kernel's notion of "how far from the data" a new control value is. Left
/// at raw physical units, a 0.3 kg/h nudge on a feed column counts as total
/// novelty and the predicted variance walls off the nominal value so sharply
/// that a finite-difference line search cannot move at all. `fit_floored`
/// lets the caller pin a minimum scale per column (an actuator-range
/// fraction for controls) so confidence decays gradually over a physically
/// meaningful distance instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vector,
    pub std: Vector,
}

impl Standardization {
    /// Population statistics of each column of `raw`.
    pub fn fit(raw: &Matrix) -> Self {
        Self::fit_floored(raw, &vec![0.0; raw.ncols()])
    }

    /// Like `fit`, but each column's scale is at least `floors[c]`.
    pub fn fit_floored(raw: &Matrix, floors: &[f64]) -> Self {
        assert_eq!(
            floors.len(),
            raw.ncols(),
            "one scale floor per input column"
        );
        let n = raw.nrows() as f64;
        let mut mean = Vector::zeros(raw.ncols());
        let mut std = Vector::zeros(raw.ncols());
        for c in 0..raw.ncols() {
            let col = raw.column(c);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[c] = m;
            let s = var.sqrt().max(floors[c]);
            std[c] = if s < 1e-12 { 1.0 } else { s };
        }
        Self { mean, std }
    }

    pub fn standardize_value(&self, col: usize, v: f64) -> f64 {
        (v - self.mean[col]) / self.std[col]
    }

    pub fn destandardize_value(&self, col: usize, v: f64) -> f64 {
        self.mean[col] + self.std[col] * v
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Regression dataset built from closed-loop trajectories: standardized input
/// rows [y[j], u[j]] and, per state i, standardized targets y_i[j+1] sharing
/// the stats of input column i.
#[derive(Debug, Clone)]
pub struct TransitionDataset {
    z: Matrix,
    targets: Vec<Vector>,
    stats: Standardization,
    d_x: usize,
    d_u: usize,
}

impl TransitionDataset {
    pub fn n_rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    /// Standardized input matrix, n_D × (d_x + d_u).
    pub fn z(&self) -> &Matrix {
        &self.z
    }

    /// Standardized targets for state channel `i`.
    pub fn target(&self, i: usize) -> &Vector {
        &self.targets[i]
    }

    pub fn stats(&self) -> &Standardization {
        &self.stats
    }

    /// Dump the standardized rows as CSV next to a JSON sidecar holding the
    /// standardization stats, so the growing dataset can be inspected offline.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = Vec::new();
        for i in 0..self.d_x {
            header.push(format!("y{i}"));
        }
        for i in 0..self.d_u {
            header.push(format!("u{i}"));
        }
        for i in 0..self.d_x {
            header.push(format!("next_y{i}"));
        }
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec = Vec::with_capacity(self.d_x + self.d_u + self.d_x);
            for c in 0..self.d_x + self.d_u {
                rec.push(format!("{}", self.z[[r, c]]));
            }
            for i in 0..self.d_x {
                rec.push(format!("{}", self.targets[i][r]));
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path, &bytes)?;
        let sidecar = SidecarStats {
            d_x: self.d_x,
            d_u: self.d_u,
            stats: self.stats.clone(),
        };
        write_atomic(
            &stats_sidecar_path(path),
            &serde_json::to_vec_pretty(&sidecar)?,
        )
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let sidecar: SidecarStats =
            serde_json::from_slice(&std::fs::read(stats_sidecar_path(path))?)?;
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(
                rec.iter()
                    .map(|v| v.parse::<f64>().map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput(format!("{} has no data rows", path.display())));
        }
        let (d_x, d_u) = (sidecar.d_x, sidecar.d_u);
        let width = d_x + d_u + d_x;
        let mut z = Matrix::zeros((rows.len(), d_x + d_u));
        let mut targets = vec![Vector::zeros(rows.len()); d_x];
        for (r, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Config(format!(
                    "row {r} has {} fields, want {width}",
                    row.len()
                )));
            }
            for c in 0..d_x + d_u {
                z[[r, c]] = row[c];
            }
            for i in 0..d_x {
                targets[i][r] = row[d_x + d_u + i];
            }
        }
        Ok(Self {
            z,
            targets,
            stats: sidecar.stats,
            d_x,
            d_u,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarStats {
    d_x: usize,
    d_u: usize,
    stats: Standardization,
}

fn stats_sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".stats.json");
    std::path::PathBuf::from(s)
}

/// Assemble the pooled dataset from `(measurements, controls)` trajectories.
/// Each trajectory with T+1 measurement rows and T control rows contributes
/// exactly T transitions; stats are fitted on the pooled inputs and targets
/// reuse the stats of their matching state input column.
pub fn build_dataset(trajectories: &[(Matrix, Matrix)]) -> Result<TransitionDataset> {
    build_dataset_scaled(trajectories, &[])
}

/// `build_dataset` with per-column scale floors (see
/// [`Standardization::fit_floored`]). `input_floors` is either empty or one
/// entry per input column, states first, then controls.
pub fn build_dataset_scaled(
    trajectories: &[(Matrix, Matrix)],
    input_floors: &[f64],
) -> Result<TransitionDataset> {
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("no trajectories to learn from".into()));
    }
    let d_x = trajectories[0].0.ncols();
    let d_u = trajectories[0].1.ncols();
    let mut n_rows = 0;
    for (k, (y, u)) in trajectories.iter().enumerate() {
        if y.ncols() != d_x || u.ncols() != d_u {
            return Err(Error::DimMismatch(format!(
                "trajectory {k}: {}×{} measurements and {}×{} controls, want widths {d_x}/{d_u}",
                y.nrows(),
                y.ncols(),
                u.nrows(),
                u.ncols()
            )));
        }
        if y.nrows() != u.nrows() + 1 {
            return Err(Error::DimMismatch(format!(
                "trajectory {k}: {} measurements for {} controls (want one more)",
                y.nrows(),
                u.nrows()
            )));
        }
        n_rows += u.nrows();
    }
    if n_rows == 0 {
        return Err(Error::EmptyInput("trajectories contain no transitions".into()));
    }
    if !input_floors.is_empty() && input_floors.len() != d_x + d_u {
        return Err(Error::DimMismatch(format!(
            "{} scale floors for {} input columns",
            input_floors.len(),
            d_x + d_u
        )));
    }
    let mut raw_z = Matrix::zeros((n_rows, d_x + d_u));
    let mut raw_targets = vec![Vector::zeros(n_rows); d_x];
    let mut r = 0;
    for (y, u) in trajectories {
        for j in 0..u.nrows() {
            raw_z.slice_mut(s![r, ..d_x]).assign(&y.row(j));
            raw_z.slice_mut(s![r, d_x..]).assign(&u.row(j));
            for i in 0..d_x {
                raw_targets[i][r] = y[[j + 1, i]];
            }
            r += 1;
        }
    }
    let stats = if input_floors.is_empty() {
        Standardization::fit(&raw_z)
    } else {
        Standardization::fit_floored(&raw_z, input_floors)
    };
    let mut z = raw_z;
    for c in 0..d_x + d_u {
        for v in z.column_mut(c).iter_mut() {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    let mut targets = raw_targets;
    for i in 0..d_x {
        for v in targets[i].iter_mut() {
            *v = (*v - stats.mean[i]) / stats.std[i];
        }
    }
    Ok(TransitionDataset {
        z,
        targets,
        stats,
        d_x,
        d_u,
    })
}

/// One sparse GP per state channel over the shared standardized inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpStateSpaceModel {
    models: Vec<SparseGpModel>,
    stats: Standardization,
    d_x: usize,
    d_u: usize,
}

impl GpStateSpaceModel {
    /// Assemble a model from independently built channel GPs. Every channel
    /// must accept the shared `d_x + d_u` standardized input layout.
    pub fn from_parts(
        models: Vec<SparseGpModel>,
        stats: Standardization,
        d_x: usize,
        d_u: usize,
    ) -> Result<Self> {
        if models.len() != d_x {
            return Err(Error::InvalidArg(format!(
                "need one GP per state channel: got {} for d_x = {d_x}",
                models.len()
            )));
        }
        if stats.dim() != d_x + d_u {
            return Err(Error::InvalidArg(format!(
                "standardization covers {} columns, expected {}",
                stats.dim(),
                d_x + d_u
            )));
        }
        for (i, m) in models.iter().enumerate() {
            if m.dim() != d_x + d_u {
                return Err(Error::InvalidArg(format!(
                    "channel {i} takes {} inputs, expected {}",
                    m.dim(),
                    d_x + d_u
                )));
            }
        }
        Ok(Self {
            models,
            stats,
            d_x,
            d_u,
        })
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn model(&self, i: usize) -> &SparseGpModel {
        &self.models[i]
    }

    pub fn stats(&self) -> &Standardization {
        &self.stats
    }

    /// Fitted noise variances mapped back to physical units:
    /// σ_n,i² · (std of state column i)².
    pub fn noise_variances(&self) -> Vector {
        Vector::from_iter(
            (0..self.d_x)
                .map(|i| self.models[i].theta().sigma_n2 * self.stats.std[i] * self.stats.std[i]),
        )
    }
}

/// Gaussian state belief with independent per-state variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBelief {
    pub mean: Vector,
    pub var: Vector,
}

impl StateBelief {
    pub fn new(mean: Vector, var: Vector) -> Self {
        assert_eq!(mean.len(), var.len(), "belief mean/variance length mismatch");
        assert!(
            var.iter().all(|v| *v >= 0.0),
            "belief variances must be non-negative, got {var}"
        );
        Self { mean, var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fit the d_x output GPs independently on the shared inputs.
pub fn fit_model(
    dataset: &TransitionDataset,
    n_m: usize,
    restarts: usize,
    rng: &mut RngStream,
) -> Result<GpStateSpaceModel> {
    if dataset.n_rows() < 2 {
        return Err(Error::EmptyInput(format!(
            "need ≥ 2 transitions to fit, got {}",
            dataset.n_rows()
        )));
    }
    let theta0 = default_theta0(dataset.d_x + dataset.d_u);
    let mut models = Vec::with_capacity(dataset.d_x);
    for i in 0..dataset.d_x {
        models.push(fit_sparse(
            dataset.z(),
            dataset.target(i),
            &theta0,
            n_m,
            restarts,
            rng,
        )?);
    }
    Ok(GpStateSpaceModel {
        models,
        stats: dataset.stats.clone(),
        d_x: dataset.d_x,
        d_u: dataset.d_u,
    })
}

/// One-step moment-matched prediction. The mean passes [μ_x, u] through each
/// GP; the variance adds the squared mean-slope times the input state
/// variances (first-order expansion, diagonal Σ_x, controls deterministic):
/// σ²_i⁺ = σ²_f,i + (∂μ_f,i/∂x)ᵀ diag(σ²_x) (∂μ_f,i/∂x). Everything runs in
/// standardized coordinates and is mapped back on return.
pub fn propagate(model: &GpStateSpaceModel, belief: &StateBelief, u: &Vector) -> StateBelief {
    let (d_x, d_u) = (model.d_x, model.d_u);
    assert_eq!(belief.dim(), d_x, "belief has wrong state dimension");
    assert_eq!(u.len(), d_u, "control has wrong dimension");
    let mut zt = Vector::zeros(d_x + d_u);
    for i in 0..d_x {
        zt[i] = model.stats.standardize_value(i, belief.mean[i]);
    }
    for k in 0..d_u {
        zt[d_x + k] = model.stats.standardize_value(d_x + k, u[k]);
    }
    // Input state variances in standardized coordinates.
    let vin: Vec<f64> = (0..d_x)
        .map(|i| belief.var[i] / (model.stats.std[i] * model.stats.std[i]))
        .collect();
    let mut mean = Vector::zeros(d_x);
    let mut var = Vector::zeros(d_x);
    for i in 0..d_x {
        let (mu, vf) = predict_sparse(&model.models[i], zt.view());
        let grad = predict_mean_gradient(&model.models[i], zt.view());
        let mut v = vf;
        for (d, vi) in vin.iter().enumerate() {
            v += grad[d] * grad[d] * vi;
        }
        mean[i] = model.stats.destandardize_value(i, mu);
        var[i] = v * model.stats.std[i] * model.stats.std[i];
    }
    StateBelief::new(mean, var)
}

/// Repeated propagation under a control sequence (one row per step). Returns
/// the N_h successor beliefs; entry j depends only on entry j−1 and u[j].
pub fn rollout(model: &GpStateSpaceModel, belief0: &StateBelief, us: &Matrix) -> Vec<StateBelief> {
    assert!(us.nrows() >= 1, "rollout needs at least one control step");
    let mut out = Vec::with_capacity(us.nrows());
    let mut b = belief0.clone();
    for j in 0..us.nrows() {
        b = propagate(model, &b, &us.row(j).to_owned());
        out.push(b.clone());
    }
    out
}
