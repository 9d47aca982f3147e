//! Protective overrides applied between the agent and the plant.
//!
//! Two rules, each latched with hysteresis:
//!
//! * centering: if the cart would get within reach of the position bound
//!   during the next three samples, drive it back at full speed until it is
//!   near the center;
//! * braking: if the angular-velocity estimate reaches the upper bound,
//!   command zero speed until bearing friction has bled it below the lower
//!   bound.
//!
//! Centering wins when both fire.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeguardConfig {
    pub x_safe: f64,
    pub x_tol: f64,
    pub omega_safe_plus: f64,
    pub omega_safe_minus: f64,
    pub v_max: f64,
    pub ts: f64,
}

impl Default for SafeguardConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            x_safe: 0.17,
            x_tol: 0.01,
            omega_safe_plus: 6.0 * PI,
            omega_safe_minus: PI / 10.0,
            v_max: 0.5,
            ts: 0.02,
        }
    }
}

impl SafeguardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.x_tol > 0.0 && self.x_tol < self.x_safe) {
            return Err(format!("need 0 < x_tol < x_safe, got {} and {}", self.x_tol, self.x_safe));
        }
        if !(self.omega_safe_minus < self.omega_safe_plus) {
            return Err("omega_safe_minus must be below omega_safe_plus".into());
        }
        if !(self.v_max > 0.0 && self.ts > 0.0) {
            return Err("v_max and ts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub enum SafeguardMode {
    #[default]
    Inactive,
    Centering,
    Braking,
}

impl SafeguardMode {
    pub fn label(self) -> &'static str {
        match self {
            SafeguardMode::Inactive => "inactive",
            SafeguardMode::Centering => "centering",
            SafeguardMode::Braking => "braking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SafeguardState {
    pub mode: SafeguardMode,
    /// Direction of travel while centering (+1 or -1).
    direction: i8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeguardOutput {
    pub v_cmd: f64,
    pub active: bool,
    pub mode: SafeguardMode,
}

impl SafeguardState {
    pub fn apply(&mut self, cfg: &SafeguardConfig, x: f64, omega_hat: f64, v_cmd_agent: f64) -> SafeguardOutput {
        match self.mode {
            SafeguardMode::Centering => {
                if x.abs() <= cfg.x_tol {
                    self.mode = SafeguardMode::Inactive;
                } else {
                    return self.centering(cfg, x);
                }
            }
            SafeguardMode::Braking => {
                // a zero speed command stops the cart within about v_max·τ,
                // so braking never has to yield to centering
                if omega_hat.abs() <= cfg.omega_safe_minus {
                    self.mode = SafeguardMode::Inactive;
                } else {
                    return self.output(0.0);
                }
            }
            SafeguardMode::Inactive => {}
        }

        let lookahead = x + 3.0 * cfg.ts * v_cmd_agent;
        if lookahead.abs() >= cfg.x_safe {
            return self.enter_centering(cfg, x, lookahead);
        }
        if omega_hat.abs() >= cfg.omega_safe_plus {
            self.mode = SafeguardMode::Braking;
            return self.output(0.0);
        }
        SafeguardOutput {
            v_cmd: v_cmd_agent,
            active: false,
            mode: SafeguardMode::Inactive,
        }
    }

    fn enter_centering(&mut self, cfg: &SafeguardConfig, x: f64, lookahead: f64) -> SafeguardOutput {
        self.mode = SafeguardMode::Centering;
        let side = if x != 0.0 { x } else { lookahead };
        self.direction = if side > 0.0 { -1 } else { 1 };
        self.centering(cfg, x)
    }

    fn centering(&mut self, cfg: &SafeguardConfig, x: f64) -> SafeguardOutput {
        // head for the center; reverse if we passed it
        if x != 0.0 {
            self.direction = if x > 0.0 { -1 } else { 1 };
        }
        self.output(self.direction as f64 * cfg.v_max)
    }

    fn output(&self, v_cmd: f64) -> SafeguardOutput {
        SafeguardOutput {
            v_cmd,
            active: true,
            mode: self.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn pass_through_when_idle() {
        let cfg = SafeguardConfig::default();
        let mut sg = SafeguardState::default();
        let out = sg.apply(&cfg, 0.0, 0.1, 0.123_456_789);
        assert_eq!(out.v_cmd, 0.123_456_789);
        assert!(!out.active);
        assert_eq!(sg.mode, SafeguardMode::Inactive);
    }

    #[test]
    fn lookahead_triggers_centering() {
        let cfg = SafeguardConfig::default();
        let mut sg = SafeguardState::default();
        let out = sg.apply(&cfg, 0.16, 0.0, 0.5);
        assert_eq!(sg.mode, SafeguardMode::Centering);
        assert_eq!(out.v_cmd, -0.5);
        // stays latched until within tolerance
        let out = sg.apply(&cfg, 0.05, 0.0, 0.5);
        assert_eq!(out.v_cmd, -0.5);
        let out = sg.apply(&cfg, 0.009, 0.0, 0.2);
        assert_eq!(sg.mode, SafeguardMode::Inactive);
        assert_eq!(out.v_cmd, 0.2);
    }

    #[test]
    fn centering_reverses_after_overshoot() {
        let cfg = SafeguardConfig::default();
        let mut sg = SafeguardState::default();
        sg.apply(&cfg, -0.17, 0.0, 0.0);
        assert_eq!(sg.apply(&cfg, -0.02, 0.0, 0.0).v_cmd, 0.5);
        assert_eq!(sg.apply(&cfg, 0.015, 0.0, 0.0).v_cmd, -0.5);
    }

    #[test]
    fn braking_hysteresis() {
        let cfg = SafeguardConfig::default();
        let mut sg = SafeguardState::default();
        let out = sg.apply(&cfg, 0.0, 6.0 * PI, 0.4);
        assert_eq!((out.v_cmd, sg.mode), (0.0, SafeguardMode::Braking));
        for w in [10.0, 3.0, 1.0, 0.4] {
            let out = sg.apply(&cfg, 0.0, -w, 0.4);
            assert_eq!(out.v_cmd, 0.0);
            assert!(out.active);
        }
        let out = sg.apply(&cfg, 0.0, PI / 10.0, 0.4);
        assert_eq!(out.v_cmd, 0.4);
        assert_eq!(sg.mode, SafeguardMode::Inactive);
    }

    #[test]
    fn centering_takes_precedence() {
        let cfg = SafeguardConfig::default();
        let mut sg = SafeguardState::default();
        let out = sg.apply(&cfg, -0.18, 7.0 * PI, 0.0);
        assert_eq!(sg.mode, SafeguardMode::Centering);
        assert_eq!(out.v_cmd, 0.5);
    }
}
