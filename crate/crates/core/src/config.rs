//! Run configuration.
//!
//! A TOML file with four sections. `plant`, `framework` and `ddpg` hold the
//! physical, control-framework and learning parameters; `artifact` holds the
//! choices this implementation makes on its own (plant model details,
//! optimizer, link cadence, noise toggles). Every key is optional and falls
//! back to its default; unknown keys are rejected. The top-level `version`
//! key names the file format revision.

use std::f64::consts::{FRAC_PI_4, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{actor_layers, critic_layers, DdpgHyper, LinearSchedule, OptimizerKind};
use crate::dynamics::{PlantLimits, PlantParams};
use crate::estimation::PllConfig;
use crate::neural::LayerSpec;
use crate::safeguard::SafeguardConfig;
use crate::task::{RewardParams, TaskLimits, ViolationFormula};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub m_rod: f64,
    pub m_cart: f64,
    pub l: f64,
    /// Control frequency (Hz).
    pub f_s: f64,
    pub g: f64,
    pub tau_v: f64,
    pub c_fric: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = PlantParams::default();
        Self {
            m_rod: p.m_rod,
            m_cart: p.m_cart,
            l: p.l,
            f_s: 50.0,
            g: p.g,
            tau_v: p.tau_v,
            c_fric: p.c_fric,
        }
    }
}

/// Where the centering rule triggers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafeguardTrigger {
    /// At the safeguarded position `x_safe`.
    #[default]
    SafePosition,
    /// At the fault bound `x_max` itself.
    FaultBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameworkSection {
    pub x_max: f64,
    pub x_safe: f64,
    pub v_max: f64,
    pub theta_thresh: f64,
    pub omega_safe_plus: f64,
    pub omega_safe_minus: f64,
    /// PLL natural frequency (Hz).
    pub f0: f64,
    /// PLL damping.
    pub d: f64,
    pub x_tol: f64,
    pub omega_norm: f64,
    pub x_ref: f64,
    pub safeguard_trigger: SafeguardTrigger,
}

impl Default for FrameworkSection {
    fn default() -> Self {
        Self {
            x_max: 0.2,
            x_safe: 0.17,
            v_max: 0.5,
            theta_thresh: FRAC_PI_4,
            omega_safe_plus: 6.0 * PI,
            omega_safe_minus: PI / 10.0,
            f0: 7.0,
            d: 1.0,
            x_tol: 0.01,
            omega_norm: 6.0 * PI,
            x_ref: 0.0,
            safeguard_trigger: SafeguardTrigger::SafePosition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgSection {
    /// Training duration (s).
    pub train_duration: f64,
    pub gamma: f64,
    /// LeakyReLU slope for negative inputs.
    pub leak: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub beta_q_init: f64,
    pub beta_q_fin: f64,
    pub beta_p_init: f64,
    pub beta_p_fin: f64,
    pub kappa: f64,
    pub batch_size: usize,
    pub memory_size: usize,
    /// OU mean-reversion rate.
    pub mu: f64,
    pub sigma_init: f64,
    pub sigma_fin: f64,
}

impl Default for DdpgSection {
    fn default() -> Self {
        Self {
            train_duration: 1800.0,
            gamma: 0.95,
            leak: 0.3,
            actor_hidden: vec![128, 128],
            critic_hidden: vec![200, 200, 200, 200],
            beta_q_init: 1e-3,
            beta_q_fin: 1e-4,
            beta_p_init: 2.5e-3,
            beta_p_fin: 2.5e-4,
            kappa: 0.15,
            batch_size: 64,
            memory_size: 60_000,
            mu: 2.0,
            sigma_init: 0.2,
            sigma_fin: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactSection {
    pub optimizer: OptimizerKind,
    /// Gradient updates between actor publications.
    pub publish_every: u64,
    pub violation_formula: ViolationFormula,
    pub exploration_noise: bool,
    pub measurement_noise: bool,
    /// Position measurement noise std (m).
    pub sigma_x: f64,
    /// Angle measurement noise std (rad).
    pub sigma_theta: f64,
    pub bit_rate: f64,
    pub link_drop_probability: f64,
    /// Write every delivered frame to `capture.bin`.
    pub capture: bool,
    /// Control ticks between telemetry frames.
    pub telemetry_every: u64,
    /// Post-training evaluation length (s).
    pub eval_duration: f64,
    /// Threshold on |θ| counted as stabilized (rad).
    pub stabilized_theta: f64,
}

impl Default for ArtifactSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            publish_every: 25,
            violation_formula: ViolationFormula::Monotone,
            exploration_noise: true,
            measurement_noise: true,
            sigma_x: 1e-4,
            sigma_theta: 1e-3,
            bit_rate: 1e6,
            link_drop_probability: 0.0,
            capture: false,
            telemetry_every: 50,
            eval_duration: 120.0,
            stabilized_theta: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub plant: PlantSection,
    pub framework: FrameworkSection,
    pub ddpg: DdpgSection,
    pub artifact: ArtifactSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            plant: PlantSection::default(),
            framework: FrameworkSection::default(),
            ddpg: DdpgSection::default(),
            artifact: ArtifactSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        self.plant_params().validate().map_err(ConfigError::Invalid)?;
        self.task_limits().validate().map_err(ConfigError::Invalid)?;
        self.safeguard().validate().map_err(ConfigError::Invalid)?;
        PllConfig::new(self.framework.f0, self.framework.d).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let fw = &self.framework;
        if !(fw.x_safe > 0.0 && fw.x_safe <= fw.x_max) {
            return bad(format!("x_safe must lie in (0, x_max], got {}", fw.x_safe));
        }
        if !(self.plant.f_s > 0.0) {
            return bad("f_s must be positive".into());
        }
        let d = &self.ddpg;
        if !(d.train_duration >= 0.0) {
            return bad("train_duration must be non-negative".into());
        }
        if !(0.0..1.0).contains(&d.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", d.gamma));
        }
        if !(0.0..=1.0).contains(&d.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", d.kappa));
        }
        if d.batch_size == 0 || d.memory_size < d.batch_size {
            return bad("need 0 < batch_size <= memory_size".into());
        }
        if d.actor_hidden.contains(&0) || d.critic_hidden.contains(&0) {
            return bad("hidden layers need at least one neuron".into());
        }
        if !(d.leak >= 0.0 && d.mu > 0.0 && d.sigma_init >= 0.0 && d.sigma_fin >= 0.0) {
            return bad("leak, mu and sigma must be non-negative (mu positive)".into());
        }
        if d.mu * self.ts() > 1.0 {
            return bad("mu·T_s above 1 makes the noise recursion overshoot".into());
        }
        let a = &self.artifact;
        if a.publish_every == 0 || a.telemetry_every == 0 {
            return bad("publish_every and telemetry_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&a.link_drop_probability) {
            return bad("link_drop_probability must lie in [0, 1]".into());
        }
        if !(a.bit_rate > 0.0 && a.sigma_x >= 0.0 && a.sigma_theta >= 0.0 && a.eval_duration >= 0.0) {
            return bad("bit_rate must be positive; noise levels and eval_duration non-negative".into());
        }
        Ok(())
    }

    pub fn ts(&self) -> f64 {
        1.0 / self.plant.f_s
    }

    pub fn steps(&self) -> u64 {
        (self.ddpg.train_duration * self.plant.f_s).round() as u64
    }

    pub fn plant_params(&self) -> PlantParams {
        let p = &self.plant;
        PlantParams {
            m_rod: p.m_rod,
            m_cart: p.m_cart,
            l: p.l,
            g: p.g,
            tau_v: p.tau_v,
            c_fric: p.c_fric,
        }
    }

    pub fn plant_limits(&self) -> PlantLimits {
        PlantLimits {
            x_max: self.framework.x_max,
            v_max: self.framework.v_max,
        }
    }

    pub fn task_limits(&self) -> TaskLimits {
        let f = &self.framework;
        TaskLimits {
            x_max: f.x_max,
            v_max: f.v_max,
            omega_norm: f.omega_norm,
            theta_thresh: f.theta_thresh,
            x_ref: f.x_ref,
        }
    }

    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            gamma: self.ddpg.gamma,
            omega_safe_plus: self.framework.omega_safe_plus,
            violation: self.artifact.violation_formula,
        }
    }

    pub fn safeguard(&self) -> SafeguardConfig {
        let f = &self.framework;
        SafeguardConfig {
            x_safe: match f.safeguard_trigger {
                SafeguardTrigger::SafePosition => f.x_safe,
                SafeguardTrigger::FaultBound => f.x_max,
            },
            x_tol: f.x_tol,
            omega_safe_plus: f.omega_safe_plus,
            omega_safe_minus: f.omega_safe_minus,
            v_max: f.v_max,
            ts: self.ts(),
        }
    }

    pub fn pll(&self) -> PllConfig {
        PllConfig::new(self.framework.f0, self.framework.d).expect("validated")
    }

    pub fn hyper(&self) -> DdpgHyper {
        let d = &self.ddpg;
        DdpgHyper {
            gamma: d.gamma,
            kappa: d.kappa,
            beta_q: LinearSchedule::new(d.beta_q_init, d.beta_q_fin, d.train_duration),
            beta_p: LinearSchedule::new(d.beta_p_init, d.beta_p_fin, d.train_duration),
            batch_size: d.batch_size,
            train_duration: d.train_duration,
        }
    }

    pub fn sigma_schedule(&self) -> LinearSchedule {
        LinearSchedule::new(self.ddpg.sigma_init, self.ddpg.sigma_fin, self.ddpg.train_duration)
    }

    pub fn actor_shapes(&self) -> Vec<LayerSpec> {
        actor_layers(&self.ddpg.actor_hidden, self.ddpg.leak)
    }

    pub fn critic_shapes(&self) -> Vec<LayerSpec> {
        critic_layers(&self.ddpg.critic_hidden, self.ddpg.leak)
    }
}
