//! Reactor ODE right-hand side and fixed-step RK4 integration.

use super::{ControlInput, PlantParams, PlantState, N_STATES};
use crate::numerics::Vector;
use crate::{Error, Result};

/// Time derivatives of all 9 states [per hour].
///
/// Intermediates (conversion U, total mass m_ges, rate constants k_R1/k_R2,
/// effective wall heat-transfer k_K, reactor-side monomer m_A,R) are evaluated
/// exactly as in the model source; Arrhenius terms take the temperature in
/// kelvin (T + 273.15) while states stay in °C.
pub fn rhs(state: &PlantState, u: &ControlInput, p: &PlantParams) -> Result<Vector> {
    let dx = rhs_arr(&state.to_array(), &u.to_array(), p)?;
    Ok(ndarray::arr1(&dx))
}

pub(crate) fn rhs_arr(
    x: &[f64; N_STATES],
    u: &[f64; 3],
    p: &PlantParams,
) -> Result<[f64; N_STATES]> {
    let [m_w, m_a, m_p, t_r, t_s, t_m, t_ek, t_awt, _t_adiab] = *x;
    let [mdot_f, t_m_in, t_awt_in] = *u;

    let m_ges = m_w + m_a + m_p;
    if !(m_ges > 0.0) {
        return Err(Error::NonFinite(format!(
            "total mass must be positive, got {m_ges}"
        )));
    }
    let monomer_polymer = m_a + m_p;
    let conv_u = if monomer_polymer > 0.0 {
        m_p / monomer_polymer
    } else {
        0.0
    };
    let rate_scale = p.k_u1 * (1.0 - conv_u) + p.k_u2 * conv_u;
    let k_r1 = p.k0 * (-p.e_a / (p.r_gas * (t_r + 273.15))).exp() * rate_scale;
    let k_r2 = p.k0 * (-p.e_a / (p.r_gas * (t_ek + 273.15))).exp() * rate_scale;
    let k_k = (m_w * p.k_ws + m_a * p.k_as + m_p * p.k_ps) / m_ges;
    let m_a_r = m_a - m_a * p.m_awt / m_ges;

    let d_m_w = mdot_f * p.omega_w_f;
    let d_m_a = mdot_f * p.omega_a_f - k_r1 * m_a_r - k_r2 * p.m_awt * m_a / m_ges;
    let d_m_p = k_r1 * m_a_r + p.p_1 * k_r2 * p.m_awt * m_a / m_ges;

    let d_t_r = (mdot_f * p.c_p_f * (p.t_f - t_r) + p.delta_h_r * k_r1 * m_a_r
        - k_k * p.a_surface * (t_r - t_s)
        - p.mdot_awt * p.c_p_r * (t_r - t_ek))
        / (p.c_p_r * m_ges);
    let d_t_s = (k_k * p.a_surface * (t_r - t_s) - k_k * p.a_surface * (t_s - t_m))
        / (p.c_p_s * p.m_s);
    let d_t_m = (p.mdot_m_kw * p.c_p_w * (t_m_in - t_m) + k_k * p.a_surface * (t_s - t_m))
        / (p.c_p_w * p.m_m_kw);
    // NB: the loop content exchanges heat with coolant via c_p_w but carries
    // reactor content (heat capacity c_p_r in the denominator) — as sourced.
    let d_t_ek = (p.mdot_awt * p.c_p_w * (t_r - t_ek) - p.alpha_heat * (t_ek - t_awt)
        + k_r2 * m_a * p.m_awt * p.delta_h_r / m_ges)
        / (p.c_p_r * p.m_awt);
    let d_t_awt = (p.mdot_awt_kw * p.c_p_w * (t_awt_in - t_awt) - p.alpha_heat * (t_awt - t_ek))
        / (p.c_p_w * p.m_awt_kw);

    let d_t_adiab = p.delta_h_r / (m_ges * p.c_p_r) * d_m_a
        - (d_m_w + d_m_a + d_m_p) * (m_a * p.delta_h_r / (m_ges * m_ges * p.c_p_r))
        + d_t_r;

    let dx = [
        d_m_w, d_m_a, d_m_p, d_t_r, d_t_s, d_t_m, d_t_ek, d_t_awt, d_t_adiab,
    ];
    for (i, v) in dx.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("state derivative {i} is {v}")));
        }
    }
    Ok(dx)
}

/// Classical RK4 with a fixed internal step, generic over the vector field.
fn rk4<F>(f: F, x0: [f64; N_STATES], dt: f64, substeps: usize) -> Result<[f64; N_STATES]>
where
    F: Fn(&[f64; N_STATES]) -> Result<[f64; N_STATES]>,
{
    let h = dt / substeps as f64;
    let mut x = x0;
    for _ in 0..substeps {
        let k1 = f(&x)?;
        let mut xt = x;
        for i in 0..N_STATES {
            xt[i] = x[i] + 0.5 * h * k1[i];
        }
        let k2 = f(&xt)?;
        for i in 0..N_STATES {
            xt[i] = x[i] + 0.5 * h * k2[i];
        }
        let k3 = f(&xt)?;
        for i in 0..N_STATES {
            xt[i] = x[i] + h * k3[i];
        }
        let k4 = f(&xt)?;
        for i in 0..N_STATES {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(x)
}

/// Integrate one control interval of `dt` hours under zero-order hold.
///
/// Masses that undershoot 0 by at most 1e-9 kg (integration round-off at
/// full monomer depletion) are clamped back to 0 with a warning.
pub fn step(
    state: &PlantState,
    u: &ControlInput,
    p: &PlantParams,
    dt: f64,
    substeps: usize,
) -> Result<PlantState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArg(format!("dt must be > 0, got {dt}")));
    }
    if substeps < 1 {
        return Err(Error::InvalidArg("substeps must be >= 1".into()));
    }
    let ua = u.to_array();
    let mut x = rk4(|x| rhs_arr(x, &ua, p), state.to_array(), dt, substeps)?;
    for i in [super::IDX_M_W, super::IDX_M_A, super::IDX_M_P] {
        if x[i] < 0.0 && x[i] >= -1e-9 {
            log::warn!("mass state {i} clamped to 0 from {:.3e} kg", x[i]);
            x[i] = 0.0;
        }
    }
    Ok(PlantState::from_array(x))
}
