//! Parameter-free velocity estimation with phase-locked loops.
//!
//! A PI element drives a virtual integrator so that its output `y` follows
//! the measurement; the PI output `u` is then the derivative estimate. Gains
//! come from matching the input-to-error transfer function
//! `s² / (s² + K_P s + K_I)` to `s² / (s² + 2 d ω₀ s + ω₀²)`.
//!
//! Both integrators are discretized with forward Euler, each advancing from
//! the values of the previous sample:
//!
//! ```text
//! e   = x - y
//! u   = K_P e + i
//! i  += K_I e T_s
//! y  += u T_s
//! ```
//!
//! The angular variant replaces `x - y` with the phase detector
//! `sin θ cos y - sin y cos θ`, which is insensitive to the ±π wrap of the
//! angle sensor.

use std::f64::consts::TAU;

use thiserror::Error;

use crate::dynamics::wrap_angle;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("PLL bandwidth and damping must be positive, got f0 = {f0}, d = {d}")]
    InvalidGains { f0: f64, d: f64 },
}

/// Returns `(K_P, K_I) = (2 d ω₀, ω₀²)` with `ω₀ = 2π f0`.
pub fn pll_gains(f0: f64, d: f64) -> Result<(f64, f64), EstimationError> {
    if !(f0.is_finite() && f0 > 0.0 && d.is_finite() && d > 0.0) {
        return Err(EstimationError::InvalidGains { f0, d });
    }
    let w0 = TAU * f0;
    Ok((2.0 * d * w0, w0 * w0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllConfig {
    pub f0: f64,
    pub d: f64,
    pub kp: f64,
    pub ki: f64,
}

impl PllConfig {
    pub fn new(f0: f64, d: f64) -> Result<Self, EstimationError> {
        let (kp, ki) = pll_gains(f0, d)?;
        Ok(Self { f0, d, kp, ki })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PllState {
    /// Virtual integrator output, tracks the measurement.
    pub y: f64,
    /// PI integrator.
    pub i_acc: f64,
    /// Published derivative estimate.
    pub u: f64,
}

impl PllState {
    /// Locked onto a constant measurement, estimate zero.
    pub fn seeded(measurement: f64) -> Self {
        Self {
            y: measurement,
            ..Self::default()
        }
    }
}

fn pi_step(state: PllState, cfg: &PllConfig, err: f64, ts: f64) -> PllState {
    let u = cfg.kp * err + state.i_acc;
    PllState {
        y: state.y + u * ts,
        i_acc: state.i_acc + cfg.ki * err * ts,
        u,
    }
}

/// One sample of the linear PLL; returns the new state and `v̂`.
pub fn pll_linear_step(state: PllState, cfg: &PllConfig, x_meas: f64, ts: f64) -> (PllState, f64) {
    let next = pi_step(state, cfg, x_meas - state.y, ts);
    (next, next.u)
}

/// Phase-detector error `sin θ cos y − sin y cos θ = sin(θ − y)`.
pub fn phase_detector(theta: f64, y: f64) -> f64 {
    let (st, ct) = theta.sin_cos();
    let (sy, cy) = y.sin_cos();
    st * cy - sy * ct
}

/// One sample of the phase-detector PLL; returns the new state and `ω̂`.
pub fn pll_angular_step(state: PllState, cfg: &PllConfig, theta_meas: f64, ts: f64) -> (PllState, f64) {
    let mut next = pi_step(state, cfg, phase_detector(theta_meas, state.y), ts);
    next.y = wrap_angle(next.y);
    (next, next.u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PllKind {
    Linear,
    Angular,
}

/// Stateful wrapper that seeds itself from the first measurement.
#[derive(Debug, Clone)]
pub struct VelocityEstimator {
    kind: PllKind,
    cfg: PllConfig,
    state: Option<PllState>,
}

impl VelocityEstimator {
    pub fn new(kind: PllKind, cfg: PllConfig) -> Self {
        Self {
            kind,
            cfg,
            state: None,
        }
    }

    pub fn update(&mut self, measurement: f64, ts: f64) -> f64 {
        let state = match self.state {
            Some(s) => s,
            None => {
                let seed = match self.kind {
                    PllKind::Linear => measurement,
                    PllKind::Angular => wrap_angle(measurement),
                };
                let s = PllState::seeded(seed);
                self.state = Some(s);
                return s.u;
            }
        };
        let (next, est) = match self.kind {
            PllKind::Linear => pll_linear_step(state, &self.cfg, measurement, ts),
            PllKind::Angular => pll_angular_step(state, &self.cfg, measurement, ts),
        };
        self.state = Some(next);
        est
    }

    pub fn estimate(&self) -> f64 {
        self.state.map_or(0.0, |s| s.u)
    }

    pub fn state(&self) -> Option<PllState> {
        self.state
    }

    pub fn reset(&mut self) {
        self.state = None;
    }
}
