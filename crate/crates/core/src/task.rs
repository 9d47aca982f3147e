//! Observation features, action scaling and the three-region reward.

use std::f64::consts::{FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

pub const OBS_DIM: usize = 8;

pub type Observation = [f64; OBS_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLimits {
    pub x_max: f64,
    pub v_max: f64,
    /// Normalizer for the angular-velocity estimate.
    pub omega_norm: f64,
    pub theta_thresh: f64,
    pub x_ref: f64,
}

impl Default for TaskLimits {
    fn default() -> Self {
        Self {
            x_max: 0.2,
            v_max: 0.5,
            omega_norm: 6.0 * PI,
            theta_thresh: FRAC_PI_4,
            x_ref: 0.0,
        }
    }
}

impl TaskLimits {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.x_max > 0.0 && self.v_max > 0.0 && self.omega_norm > 0.0) {
            return Err("x_max, v_max and omega_norm must be positive".into());
        }
        if !(self.theta_thresh > 0.0 && self.theta_thresh < PI) {
            return Err(format!("theta_thresh must lie in (0, π), got {}", self.theta_thresh));
        }
        if self.x_ref.abs() > self.x_max {
            return Err(format!("|x_ref| = {} exceeds x_max", self.x_ref.abs()));
        }
        Ok(())
    }
}

/// Builds the eight-entry observation. Nothing is clamped.
pub fn build_observation(x: f64, v_hat: f64, theta: f64, omega_hat: f64, v_prev: f64, limits: &TaskLimits) -> Observation {
    let (s, c) = theta.sin_cos();
    [
        x / limits.x_max,
        v_hat / limits.v_max,
        c,
        s,
        omega_hat / limits.omega_norm,
        v_prev / limits.v_max,
        limits.x_ref / limits.x_max,
        (limits.x_ref - x) / (2.0 * limits.x_max),
    ]
}

/// Maps the normalized action onto a speed reference. Not clamped; the
/// input-violation reward region covers commands beyond `v_max`.
pub fn denormalize_action(a_hat: f64, v_max: f64) -> f64 {
    a_hat * v_max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardRegion {
    /// Commanded speed beyond the drive's capability.
    InputViolation,
    /// Swinging, pendulum outside the angle threshold.
    Swing,
    /// Near upright; velocity and positioning are rated.
    Upright,
}

impl RewardRegion {
    pub fn label(self) -> &'static str {
        match self {
            RewardRegion::InputViolation => "C",
            RewardRegion::Swing => "B",
            RewardRegion::Upright => "A",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationFormula {
    /// `−(1−γ)|v*|/v_max`: equals `−(1−γ)` at the limit and falls as the
    /// violation grows.
    #[default]
    Monotone,
    /// `(1−γ)((|v*|−v_max)/v_max − 1)`: rises with the violation, so it rewards
    /// larger overshoot; kept for comparison runs.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    pub gamma: f64,
    pub omega_safe_plus: f64,
    pub violation: ViolationFormula,
}

pub fn region(v_cmd: f64, theta: f64, limits: &TaskLimits) -> RewardRegion {
    if v_cmd.abs() > limits.v_max {
        RewardRegion::InputViolation
    } else if theta.abs() > limits.theta_thresh {
        RewardRegion::Swing
    } else {
        RewardRegion::Upright
    }
}

pub fn reward(
    v_cmd: f64,
    theta: f64,
    omega_hat: f64,
    x: f64,
    limits: &TaskLimits,
    params: &RewardParams,
) -> (f64, RewardRegion) {
    let scale = 1.0 - params.gamma;
    let reg = region(v_cmd, theta, limits);
    let r = match reg {
        RewardRegion::InputViolation => match params.violation {
            ViolationFormula::Monotone => -scale * v_cmd.abs() / limits.v_max,
            ViolationFormula::Literal => scale * ((v_cmd.abs() - limits.v_max) / limits.v_max - 1.0),
        },
        RewardRegion::Swing => 0.25 * scale * (theta.cos() - 3.0),
        RewardRegion::Upright => {
            let omega_term = 3.0 * (1.0 - omega_hat.abs() / params.omega_safe_plus);
            let pos_term = 3.0 * (1.0 - (limits.x_ref - x).abs() / (2.0 * limits.x_max));
            0.25 * (omega_term + pos_term - 2.0) * scale
        }
    };
    (r, reg)
}
