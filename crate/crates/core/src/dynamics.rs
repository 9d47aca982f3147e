//! Cart-pendulum plant simulator.
//!
//! Angles are measured from the upright position, so `theta = 0` is the
//! inverted equilibrium and `theta = ±π` the hanging one. Both models are
//! integrated with classical RK4 on a fixed 1 ms substep.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Internal integration substep (s).
pub const SUBSTEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub m_rod: f64,
    pub m_cart: f64,
    pub l: f64,
    pub g: f64,
    /// Time constant of the inner speed loop (s).
    pub tau_v: f64,
    /// Viscous bearing friction on the rod (1/s).
    pub c_fric: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            m_rod: 0.3,
            m_cart: 0.865,
            l: 0.29,
            g: 9.81,
            tau_v: 0.02,
            c_fric: 0.1,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("m_rod", self.m_rod),
            ("m_cart", self.m_cart),
            ("l", self.l),
            ("g", self.g),
            ("tau_v", self.tau_v),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.c_fric.is_finite() && self.c_fric >= 0.0) {
            return Err(format!("c_fric must be non-negative, got {}", self.c_fric));
        }
        if !(0.135..=0.29).contains(&self.l) {
            log::warn!("rod length {} m lies outside the 0.135..0.29 m rig range", self.l);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantLimits {
    /// Position at which the plant shuts down (m).
    pub x_max: f64,
    /// Speed capability of the cart drive (m/s); references beyond it saturate.
    pub v_max: f64,
}

impl Default for PlantLimits {
    fn default() -> Self {
        Self {
            x_max: 0.2,
            v_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub x: f64,
    pub v: f64,
    pub theta: f64,
    pub omega: f64,
    pub t: f64,
}

impl PlantState {
    /// Cart centered and at rest, pendulum hanging down.
    pub fn hanging() -> Self {
        Self {
            theta: PI,
            ..Self::default()
        }
    }

    fn is_finite(&self) -> bool {
        [self.x, self.v, self.theta, self.omega, self.t]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum PlantError {
    #[error("position fault: |x| = {x:.4} m exceeded the limit at t = {t:.3} s")]
    PositionViolation { x: f64, t: f64 },
    #[error("singular mass matrix")]
    SingularMassMatrix,
    #[error("invalid step input: {0}")]
    InvalidInput(&'static str),
}

/// Wraps an angle into `[-π, π]`. Odd multiples of π map to `+π`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..=PI).contains(&theta) {
        return theta;
    }
    let r = (theta + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

type Deriv = [f64; 4];

fn rk4(state: [f64; 4], h: f64, f: impl Fn(&[f64; 4]) -> Result<Deriv, PlantError>) -> Result<[f64; 4], PlantError> {
    let add = |s: &[f64; 4], k: &Deriv, c: f64| -> [f64; 4] {
        [s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2], s[3] + c * k[3]]
    };
    let k1 = f(&state)?;
    let k2 = f(&add(&state, &k1, h / 2.0))?;
    let k3 = f(&add(&state, &k2, h / 2.0))?;
    let k4 = f(&add(&state, &k3, h))?;
    let mut out = state;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

fn substeps(dt: f64) -> (usize, f64) {
    let n = (dt / SUBSTEP).round().max(1.0) as usize;
    (n, dt / n as f64)
}

fn check_inputs(state: &PlantState, dt: f64, input: f64) -> Result<(), PlantError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(PlantError::InvalidInput("dt must be positive"));
    }
    if !state.is_finite() || !input.is_finite() {
        return Err(PlantError::InvalidInput("non-finite state or input"));
    }
    Ok(())
}

/// Speed-controlled model: the cart follows `v_cmd` (saturated at `v_max`)
/// through a first-order lag and the rod is driven by the cart acceleration.
pub fn step_reduced(
    params: &PlantParams,
    limits: &PlantLimits,
    state: &PlantState,
    v_cmd: f64,
    dt: f64,
) -> Result<PlantState, PlantError> {
    check_inputs(state, dt, v_cmd)?;
    let v_ref = v_cmd.clamp(-limits.v_max, limits.v_max);
    let (n, h) = substeps(dt);
    let p = *params;
    let f = |s: &[f64; 4]| -> Result<Deriv, PlantError> {
        let [_, v, th, om] = *s;
        let acc = (v_ref - v) / p.tau_v;
        let alpha = th.cos() * acc / p.l + p.g / p.l * th.sin() - p.c_fric * om;
        Ok([v, acc, om, alpha])
    };
    integrate(state, n, h, limits.x_max, f)
}

/// Force-driven two-equation model, solved for both accelerations at every
/// stage. Used to cross-check the reduced model.
pub fn step_full(
    params: &PlantParams,
    limits: &PlantLimits,
    state: &PlantState,
    force: f64,
    dt: f64,
) -> Result<PlantState, PlantError> {
    check_inputs(state, dt, force)?;
    let (n, h) = substeps(dt);
    let p = *params;
    let f = |s: &[f64; 4]| -> Result<Deriv, PlantError> {
        let [_, v, th, om] = *s;
        let (acc, alpha) = full_accelerations(&p, th, om, force)?;
        Ok([v, acc, om, alpha])
    };
    integrate(state, n, h, limits.x_max, f)
}

/// Solves
/// `(m_c + m_r) ẍ − m_r l cos θ θ̈ = F − m_r l sin θ ω²` and
/// `−cos θ ẍ + l θ̈ = g sin θ − l c ω`.
pub fn full_accelerations(p: &PlantParams, theta: f64, omega: f64, force: f64) -> Result<(f64, f64), PlantError> {
    let (s, c) = theta.sin_cos();
    let a11 = p.m_cart + p.m_rod;
    let a12 = -p.m_rod * p.l * c;
    let a21 = -c;
    let a22 = p.l;
    let b1 = force - p.m_rod * p.l * s * omega * omega;
    let b2 = p.g * s - p.l * p.c_fric * omega;
    let det = a11 * a22 - a12 * a21;
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(PlantError::SingularMassMatrix);
    }
    Ok(((b1 * a22 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det))
}

/// Kinetic plus potential energy of the force-driven model, with the
/// potential zero at the pivot height.
pub fn mechanical_energy(p: &PlantParams, s: &PlantState) -> f64 {
    let (sin, cos) = s.theta.sin_cos();
    // rod mass position: (x - l sin θ, l cos θ)
    let vx = s.v - p.l * cos * s.omega;
    let vy = -p.l * sin * s.omega;
    0.5 * p.m_cart * s.v * s.v + 0.5 * p.m_rod * (vx * vx + vy * vy) + p.m_rod * p.g * p.l * cos
}

fn integrate(
    state: &PlantState,
    n: usize,
    h: f64,
    x_max: f64,
    f: impl Fn(&[f64; 4]) -> Result<Deriv, PlantError>,
) -> Result<PlantState, PlantError> {
    let mut s = [state.x, state.v, state.theta, state.omega];
    let mut t = state.t;
    for _ in 0..n {
        s = rk4(s, h, &f)?;
        t += h;
        s[2] = wrap_angle(s[2]);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(PlantError::InvalidInput("integration diverged"));
        }
        if s[0].abs() > x_max {
            return Err(PlantError::PositionViolation { x: s[0], t });
        }
    }
    Ok(PlantState {
        x: s[0],
        v: s[1],
        theta: s[2],
        omega: s[3],
        t,
    })
}
