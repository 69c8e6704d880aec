//! Ground-truth simulator of the semi-batch polymerization reactor:
//! ODE right-hand side and RK4 integration over one control interval,
//! Gaussian measurement noise, and constraint monitoring.
//!
//! States (in this order everywhere): masses m_W, m_A, m_P [kg] of water,
//! monomer, and polymer; temperatures T_R (reactor), T_S (vessel wall),
//! T_M (jacket), T_EK (external-loop outlet), T_AWT (external heat exchanger)
//! [°C]; and T_adiab [°C], the adiabatic end temperature the reactor would
//! reach under total cooling failure.

mod dynamics;

pub use dynamics::{rhs, step};

use ndarray::arr1;
use serde::{Deserialize, Serialize};

use crate::numerics::{RngStream, Vector};
use crate::{Error, Result};

pub const N_STATES: usize = 9;
pub const N_CONTROLS: usize = 3;

/// State-vector indices.
pub const IDX_M_W: usize = 0;
pub const IDX_M_A: usize = 1;
pub const IDX_M_P: usize = 2;
pub const IDX_T_R: usize = 3;
pub const IDX_T_S: usize = 4;
pub const IDX_T_M: usize = 5;
pub const IDX_T_EK: usize = 6;
pub const IDX_T_AWT: usize = 7;
pub const IDX_T_ADIAB: usize = 8;

/// Control-vector indices.
pub const IDX_U_MDOT_F: usize = 0;
pub const IDX_U_T_M_IN: usize = 1;
pub const IDX_U_T_AWT_IN: usize = 2;

/// Reactor model parameters.
///
/// The modeling source gives the ODE structure but not the numbers; the
/// values shipped in `config/plant.toml` are transcribed from Lucia et al.
/// (2014), the industrial polymerization benchmark this model originates
/// from. Units are declared per field; time is measured in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Arrhenius pre-exponential factor [1/h].
    #[serde(rename = "k0_per_h")]
    pub k0: f64,
    /// Activation energy [kJ/kmol].
    #[serde(rename = "e_a_kj_per_kmol")]
    pub e_a: f64,
    /// Gas constant [kJ/(kmol·K)].
    #[serde(rename = "r_gas_kj_per_kmol_k")]
    pub r_gas: f64,
    /// Reaction-rate factor at conversion U = 0 [–].
    #[serde(rename = "k_u1")]
    pub k_u1: f64,
    /// Reaction-rate factor at conversion U = 1 [–].
    #[serde(rename = "k_u2")]
    pub k_u2: f64,
    /// Water/vessel heat-transfer coefficient [kJ/(h·m²·K)].
    #[serde(rename = "k_ws_kj_per_h_m2_k")]
    pub k_ws: f64,
    /// Monomer/vessel heat-transfer coefficient [kJ/(h·m²·K)].
    #[serde(rename = "k_as_kj_per_h_m2_k")]
    pub k_as: f64,
    /// Polymer/vessel heat-transfer coefficient [kJ/(h·m²·K)].
    #[serde(rename = "k_ps_kj_per_h_m2_k")]
    pub k_ps: f64,
    /// Specific heat of the reactor content [kJ/(kg·K)].
    #[serde(rename = "c_p_r_kj_per_kg_k")]
    pub c_p_r: f64,
    /// Specific heat of the vessel wall [kJ/(kg·K)].
    #[serde(rename = "c_p_s_kj_per_kg_k")]
    pub c_p_s: f64,
    /// Specific heat of water [kJ/(kg·K)].
    #[serde(rename = "c_p_w_kj_per_kg_k")]
    pub c_p_w: f64,
    /// Specific heat of the feed [kJ/(kg·K)].
    #[serde(rename = "c_p_f_kj_per_kg_k")]
    pub c_p_f: f64,
    /// Reaction enthalpy [kJ/kg], positive (exothermic).
    #[serde(rename = "delta_h_r_kj_per_kg")]
    pub delta_h_r: f64,
    /// Reactor wall surface area [m²].
    #[serde(rename = "a_surface_m2")]
    pub a_surface: f64,
    /// External heat-exchanger transfer coefficient [kJ/(h·K)].
    /// (Named `alpha_heat` to avoid colliding with the soft-constraint weight.)
    #[serde(rename = "alpha_heat_kj_per_h_k")]
    pub alpha_heat: f64,
    /// Vessel wall mass [kg].
    #[serde(rename = "m_s_kg")]
    pub m_s: f64,
    /// Reactor content held in the external loop [kg].
    #[serde(rename = "m_awt_kg")]
    pub m_awt: f64,
    /// Jacket coolant holdup [kg].
    #[serde(rename = "m_m_kw_kg")]
    pub m_m_kw: f64,
    /// External heat-exchanger coolant holdup [kg].
    #[serde(rename = "m_awt_kw_kg")]
    pub m_awt_kw: f64,
    /// Jacket coolant flow [kg/h].
    #[serde(rename = "mdot_m_kw_kg_per_h")]
    pub mdot_m_kw: f64,
    /// External heat-exchanger coolant flow [kg/h].
    #[serde(rename = "mdot_awt_kw_kg_per_h")]
    pub mdot_awt_kw: f64,
    /// Reactor-content flow through the external loop [kg/h].
    #[serde(rename = "mdot_awt_kg_per_h")]
    pub mdot_awt: f64,
    /// Feed temperature [°C].
    #[serde(rename = "t_f_degc")]
    pub t_f: f64,
    /// Water mass fraction of the feed [–].
    #[serde(rename = "omega_w_f")]
    pub omega_w_f: f64,
    /// Monomer mass fraction of the feed [–].
    #[serde(rename = "omega_a_f")]
    pub omega_a_f: f64,
    /// Fraction of external-loop reaction product counted as polymer [–].
    #[serde(rename = "p_1")]
    pub p_1: f64,
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("k0_per_h", self.k0),
            ("e_a_kj_per_kmol", self.e_a),
            ("r_gas_kj_per_kmol_k", self.r_gas),
            ("k_u1", self.k_u1),
            ("k_u2", self.k_u2),
            ("k_ws_kj_per_h_m2_k", self.k_ws),
            ("k_as_kj_per_h_m2_k", self.k_as),
            ("k_ps_kj_per_h_m2_k", self.k_ps),
            ("c_p_r_kj_per_kg_k", self.c_p_r),
            ("c_p_s_kj_per_kg_k", self.c_p_s),
            ("c_p_w_kj_per_kg_k", self.c_p_w),
            ("c_p_f_kj_per_kg_k", self.c_p_f),
            ("delta_h_r_kj_per_kg", self.delta_h_r),
            ("a_surface_m2", self.a_surface),
            ("alpha_heat_kj_per_h_k", self.alpha_heat),
            ("m_s_kg", self.m_s),
            ("m_awt_kg", self.m_awt),
            ("m_m_kw_kg", self.m_m_kw),
            ("m_awt_kw_kg", self.m_awt_kw),
            ("mdot_m_kw_kg_per_h", self.mdot_m_kw),
            ("mdot_awt_kw_kg_per_h", self.mdot_awt_kw),
            ("mdot_awt_kg_per_h", self.mdot_awt),
            ("omega_w_f", self.omega_w_f),
            ("omega_a_f", self.omega_a_f),
            ("p_1", self.p_1),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "plant parameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        if !self.t_f.is_finite() {
            return Err(Error::Config("t_f_degc must be finite".into()));
        }
        if self.omega_w_f + self.omega_a_f > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "feed mass fractions must sum to <= 1, got {}",
                self.omega_w_f + self.omega_a_f
            )));
        }
        Ok(())
    }
}

/// The 9 reactor states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    #[serde(rename = "m_w_kg")]
    pub m_w: f64,
    #[serde(rename = "m_a_kg")]
    pub m_a: f64,
    #[serde(rename = "m_p_kg")]
    pub m_p: f64,
    #[serde(rename = "t_r_degc")]
    pub t_r: f64,
    #[serde(rename = "t_s_degc")]
    pub t_s: f64,
    #[serde(rename = "t_m_degc")]
    pub t_m: f64,
    #[serde(rename = "t_ek_degc")]
    pub t_ek: f64,
    #[serde(rename = "t_awt_degc")]
    pub t_awt: f64,
    #[serde(rename = "t_adiab_degc")]
    pub t_adiab: f64,
}

impl PlantState {
    pub fn to_array(self) -> [f64; N_STATES] {
        [
            self.m_w, self.m_a, self.m_p, self.t_r, self.t_s, self.t_m, self.t_ek, self.t_awt,
            self.t_adiab,
        ]
    }

    pub fn from_array(x: [f64; N_STATES]) -> Self {
        Self {
            m_w: x[IDX_M_W],
            m_a: x[IDX_M_A],
            m_p: x[IDX_M_P],
            t_r: x[IDX_T_R],
            t_s: x[IDX_T_S],
            t_m: x[IDX_T_M],
            t_ek: x[IDX_T_EK],
            t_awt: x[IDX_T_AWT],
            t_adiab: x[IDX_T_ADIAB],
        }
    }

    pub fn to_vector(self) -> Vector {
        arr1(&self.to_array())
    }
}

/// The three manipulated inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Feed rate [kg/h].
    #[serde(rename = "mdot_f_kg_per_h")]
    pub mdot_f: f64,
    /// Jacket coolant inlet temperature [°C].
    #[serde(rename = "t_m_in_degc")]
    pub t_m_in: f64,
    /// External heat-exchanger coolant inlet temperature [°C].
    #[serde(rename = "t_awt_in_degc")]
    pub t_awt_in: f64,
}

impl ControlInput {
    pub fn to_array(self) -> [f64; N_CONTROLS] {
        [self.mdot_f, self.t_m_in, self.t_awt_in]
    }

    pub fn from_array(u: [f64; N_CONTROLS]) -> Self {
        Self {
            mdot_f: u[IDX_U_MDOT_F],
            t_m_in: u[IDX_U_T_M_IN],
            t_awt_in: u[IDX_U_T_AWT_IN],
        }
    }

    pub fn to_vector(self) -> Vector {
        arr1(&self.to_array())
    }
}

/// Per-control box bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    #[serde(rename = "mdot_f_kg_per_h")]
    pub mdot_f: (f64, f64),
    #[serde(rename = "t_m_in_degc")]
    pub t_m_in: (f64, f64),
    #[serde(rename = "t_awt_in_degc")]
    pub t_awt_in: (f64, f64),
}

impl ControlBounds {
    pub fn as_boxes(&self) -> [(f64, f64); N_CONTROLS] {
        [self.mdot_f, self.t_m_in, self.t_awt_in]
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            mdot_f: u.mdot_f.clamp(self.mdot_f.0, self.mdot_f.1),
            t_m_in: u.t_m_in.clamp(self.t_m_in.0, self.t_m_in.1),
            t_awt_in: u.t_awt_in.clamp(self.t_awt_in.0, self.t_awt_in.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("mdot_f_kg_per_h", self.mdot_f),
            ("t_m_in_degc", self.t_m_in),
            ("t_awt_in_degc", self.t_awt_in),
        ] {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "control bound {name}: lower {lo} must be < upper {hi}"
                )));
            }
        }
        Ok(())
    }
}

/// Measurement-noise standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(rename = "sigma_temp_degc")]
    pub sigma_temp: f64,
    #[serde(rename = "sigma_mass_kg")]
    pub sigma_mass: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            sigma_temp: 0.0,
            sigma_mass: 0.0,
        }
    }

    /// Per-state standard deviation in state order.
    pub fn per_state(&self) -> [f64; N_STATES] {
        let mut s = [self.sigma_temp; N_STATES];
        s[IDX_M_W] = self.sigma_mass;
        s[IDX_M_A] = self.sigma_mass;
        s[IDX_M_P] = self.sigma_mass;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_temp < 0.0 || self.sigma_mass < 0.0 {
            return Err(Error::Config("noise std deviations must be >= 0".into()));
        }
        Ok(())
    }
}

/// Operating constraints and batch timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// Reactor temperature setpoint [°C].
    #[serde(rename = "t_set_degc")]
    pub t_set: f64,
    /// Allowed band around the setpoint [±°C].
    #[serde(rename = "band_degc")]
    pub band: f64,
    /// Safety bound on the adiabatic end temperature [°C].
    #[serde(rename = "t_adiab_max_degc")]
    pub t_adiab_max: f64,
    /// Batch duration [h].
    #[serde(rename = "batch_duration_h")]
    pub batch_duration: f64,
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.band > 0.0) {
            return Err(Error::Config("constraint band must be > 0".into()));
        }
        for (name, v) in [
            ("t_set_degc", self.t_set),
            ("t_adiab_max_degc", self.t_adiab_max),
            ("batch_duration_h", self.batch_duration),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Integration settings for one control interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSpec {
    /// Sampling interval [s] (the zero-order-hold length).
    pub dt_s: f64,
    /// RK4 substeps per interval.
    pub substeps: usize,
}

impl IntegrationSpec {
    pub fn dt_hours(&self) -> f64 {
        self.dt_s / 3600.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0) {
            return Err(Error::Config("dt_s must be > 0".into()));
        }
        if self.substeps < 1 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything the simulator and controllers need to know about the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub params: PlantParams,
    pub initial_state: PlantState,
    pub control_bounds: ControlBounds,
    /// Constant inputs of the seed controller and the OCP cold-start profile.
    pub nominal_controls: ControlInput,
    pub noise: NoiseSpec,
    pub constraints: ConstraintSpec,
    pub integration: IntegrationSpec,
}

impl PlantConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read plant config {}: {e}", path.display()))
        })?;
        let cfg: PlantConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("plant config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.control_bounds.validate()?;
        self.noise.validate()?;
        self.constraints.validate()?;
        self.integration.validate()?;
        let s = self.initial_state;
        if s.m_w < 0.0 || s.m_a < 0.0 || s.m_p < 0.0 {
            return Err(Error::Config("initial masses must be >= 0".into()));
        }
        let u = self.nominal_controls;
        let clamped = self.control_bounds.clamp(u);
        if clamped != u {
            return Err(Error::Config(
                "nominal controls must lie within the control bounds".into(),
            ));
        }
        Ok(())
    }

    /// Number of control intervals in one batch.
    pub fn steps_per_batch(&self) -> usize {
        (self.constraints.batch_duration * 3600.0 / self.integration.dt_s).round() as usize
    }
}

/// Noisy measurement of all states: y_i = x_i + ε_i, ε_i ~ N(0, σ_i²),
/// i.i.d. across states and time. Mass channels use σ_mass, temperature
/// channels σ_temp.
pub fn measure(state: &PlantState, noise: &NoiseSpec, rng: &mut RngStream) -> Vector {
    let x = state.to_array();
    let sigma = noise.per_state();
    let mut y = Vector::zeros(N_STATES);
    for i in 0..N_STATES {
        y[i] = x[i] + sigma[i] * rng.normal();
    }
    y
}

/// Per-constraint violation magnitudes [°C]:
/// (T_R above band, T_R below band, T_adiab above limit).
pub fn violation(state: &PlantState, spec: &ConstraintSpec) -> [f64; 3] {
    let hi = spec.t_set + spec.band;
    let lo = spec.t_set - spec.band;
    [
        (state.t_r - hi).max(0.0),
        (lo - state.t_r).max(0.0),
        (state.t_adiab - spec.t_adiab_max).max(0.0),
    ]
}

/// One closed-loop batch: states x[0..=T], measurements y[0..=T], controls
/// u[0..T] (u[j] held over [t_j, t_{j+1})).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt_s: f64,
    pub states: Vec<PlantState>,
    pub measurements: Vec<Vector>,
    pub controls: Vec<ControlInput>,
}

impl Trajectory {
    pub fn new(dt_s: f64) -> Self {
        Self {
            dt_s,
            states: Vec::new(),
            measurements: Vec::new(),
            controls: Vec::new(),
        }
    }

    /// Number of control intervals T.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.controls.len() + 1
            || self.measurements.len() != self.states.len()
        {
            return Err(Error::DimMismatch(format!(
                "trajectory needs |states| = |measurements| = |controls|+1, got {}/{}/{}",
                self.states.len(),
                self.measurements.len(),
                self.controls.len()
            )));
        }
        Ok(())
    }

    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["time_s".to_string()];
        let state_cols = [
            "m_w_kg", "m_a_kg", "m_p_kg", "t_r_degc", "t_s_degc", "t_m_degc", "t_ek_degc",
            "t_awt_degc", "t_adiab_degc",
        ];
        h.extend(state_cols.iter().map(|c| c.to_string()));
        h.extend(state_cols.iter().map(|c| format!("y_{c}")));
        h.extend(
            ["u_mdot_f_kg_per_h", "u_t_m_in_degc", "u_t_awt_in_degc"]
                .iter()
                .map(|c| c.to_string()),
        );
        h.extend(
            ["viol_t_r_high_degc", "viol_t_r_low_degc", "viol_t_adiab_degc"]
                .iter()
                .map(|c| c.to_string()),
        );
        h
    }

    /// Write one row per state sample; the final row has empty control cells
    /// (no control is applied after the last sample).
    pub fn write_csv(&self, path: &std::path::Path, spec: &ConstraintSpec) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::csv_header())?;
        for (j, state) in self.states.iter().enumerate() {
            let mut row: Vec<String> = Vec::with_capacity(25);
            row.push(format!("{}", j as f64 * self.dt_s));
            for v in state.to_array() {
                row.push(format!("{v}"));
            }
            for v in self.measurements[j].iter() {
                row.push(format!("{v}"));
            }
            if j < self.controls.len() {
                for v in self.controls[j].to_array() {
                    row.push(format!("{v}"));
                }
            } else {
                row.extend(std::iter::repeat_n(String::new(), N_CONTROLS));
            }
            for v in violation(state, spec) {
                row.push(format!("{v}"));
            }
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Config(format!("csv flush: {e}")))?;
        crate::util::write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &std::path::Path, dt_s: f64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut traj = Trajectory::new(dt_s);
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Config(format!("trajectory csv: missing column {i}")))?
                    .parse()
                    .map_err(|e| Error::Config(format!("trajectory csv: {e}")))
            };
            let mut xs = [0.0; N_STATES];
            let mut ys = [0.0; N_STATES];
            for i in 0..N_STATES {
                xs[i] = f(1 + i)?;
                ys[i] = f(1 + N_STATES + i)?;
            }
            traj.states.push(PlantState::from_array(xs));
            traj.measurements.push(arr1(&ys));
            let u_start = 1 + 2 * N_STATES;
            if rec.get(u_start).is_some_and(|s| !s.is_empty()) {
                let mut us = [0.0; N_CONTROLS];
                for i in 0..N_CONTROLS {
                    us[i] = f(u_start + i)?;
                }
                traj.controls.push(ControlInput::from_array(us));
            }
        }
        traj.validate()?;
        Ok(traj)
    }
}
