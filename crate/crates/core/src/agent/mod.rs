//! Deterministic policy-gradient learner.
//!
//! The critic `q̂(o, a)` takes `o ‖ a` as its input row; the actor `p̂(o)`
//! emits one unbounded normalized speed command. Both have slowly tracking
//! target copies that supply the bootstrap target.

mod noise;
mod optim;
mod replay;
mod schedule;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use noise::OuNoise;
pub use optim::{Optimizer, OptimizerKind};
pub use replay::{Experience, InsufficientFill, ReplayBuffer};
pub use schedule::{schedule, LinearSchedule};

use crate::neural::{dense_stack, LayerSpec, MlpParams, NeuralError};
use crate::task::{Observation, OBS_DIM};

pub const CRITIC_INPUT: usize = OBS_DIM + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DdpgHyper {
    pub gamma: f64,
    pub kappa: f64,
    pub beta_q: LinearSchedule,
    pub beta_p: LinearSchedule,
    pub batch_size: usize,
    /// Training duration `T_t` (s).
    pub train_duration: f64,
}

impl Default for DdpgHyper {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            kappa: 0.15,
            beta_q: LinearSchedule::new(1e-3, 1e-4, 1800.0),
            beta_p: LinearSchedule::new(2.5e-3, 2.5e-4, 1800.0),
            batch_size: 64,
            train_duration: 1800.0,
        }
    }
}

/// Actor and critic stacks: hidden widths plus the shared leakage.
pub fn actor_layers(hidden: &[usize], leak: f64) -> Vec<LayerSpec> {
    dense_stack(OBS_DIM, hidden, 1, leak)
}

pub fn critic_layers(hidden: &[usize], leak: f64) -> Vec<LayerSpec> {
    dense_stack(CRITIC_INPUT, hidden, 1, leak)
}

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngStream {
    WeightInit = 1,
    Exploration = 2,
    Sampling = 3,
    Measurement = 4,
    Link = 5,
}

pub fn rng_stream(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub actor_target: MlpParams,
    pub critic_target: MlpParams,
    /// Bumped on every actor publication.
    pub weight_version: u64,
}

impl AgentNets {
    /// Random live networks, targets initialized as exact copies.
    pub fn init<R: Rng + ?Sized>(actor_shapes: Vec<LayerSpec>, critic_shapes: Vec<LayerSpec>, rng: &mut R) -> Result<Self, NeuralError> {
        let actor = MlpParams::init(actor_shapes, rng)?;
        let critic = MlpParams::init(critic_shapes, rng)?;
        Ok(Self::from_live(actor, critic))
    }

    pub fn from_live(actor: MlpParams, critic: MlpParams) -> Self {
        Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            weight_version: 0,
        }
    }

    /// Advances the version counter for a new actor snapshot and returns it.
    pub fn next_version(&mut self) -> u64 {
        self.weight_version += 1;
        self.weight_version
    }
}

/// Optimizer state for both live networks.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: Optimizer,
    pub critic: Optimizer,
}

impl Optimizers {
    pub fn new(kind: OptimizerKind, nets: &AgentNets) -> Self {
        Self {
            actor: Optimizer::new(kind, nets.actor.param_count()),
            critic: Optimizer::new(kind, nets.critic.param_count()),
        }
    }
}

/// Deterministic policy output for one observation.
pub fn act(actor: &MlpParams, o: &Observation) -> f64 {
    actor.forward(o).expect("actor input width is OBS_DIM")[0]
}

fn critic_rows(obs: impl Iterator<Item = (Observation, f64)>, batch: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(batch * CRITIC_INPUT);
    for (o, a) in obs {
        rows.extend_from_slice(&o);
        rows.push(a);
    }
    rows
}

fn flatten_obs<'a>(obs: impl Iterator<Item = &'a Observation>, batch: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(batch * OBS_DIM);
    for o in obs {
        rows.extend_from_slice(o);
    }
    rows
}

/// Bootstrap targets `r + γ q̂'(o', p̂'(o'))` from the frozen target networks.
pub fn bootstrap_targets(nets: &AgentNets, batch: &[Experience], gamma: f64) -> Vec<f64> {
    let n = batch.len();
    let next = flatten_obs(batch.iter().map(|e| &e.o_next), n);
    let a_next = nets.actor_target.forward_batch(&next, n).expect("actor shape");
    let rows = critic_rows(batch.iter().zip(a_next.output()).map(|(e, &a)| (e.o_next, a)), n);
    let q_next = nets.critic_target.forward_batch(&rows, n).expect("critic shape");
    batch
        .iter()
        .zip(q_next.output())
        .map(|(e, q)| e.r + gamma * q)
        .collect()
}

/// Mean squared Bellman error and its parameter gradient, without applying it.
pub fn critic_loss_and_gradient(nets: &AgentNets, batch: &[Experience], gamma: f64) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "critic update needs a non-empty batch");
    let n = batch.len();
    let targets = bootstrap_targets(nets, batch, gamma);
    let rows = critic_rows(batch.iter().map(|e| (e.o, e.a)), n);
    let cache = nets.critic.forward_batch(&rows, n).expect("critic shape");
    let residual: Vec<f64> = cache.output().iter().zip(&targets).map(|(q, y)| q - y).collect();
    let loss = residual.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let d_out: Vec<f64> = residual.iter().map(|d| 2.0 * d / n as f64).collect();
    let grads = nets.critic.backward(&cache, &d_out).expect("cache matches");
    (loss, grads.params)
}

/// One critic step; returns `J_q` evaluated before the step.
pub fn critic_update(nets: &mut AgentNets, opt: &mut Optimizer, batch: &[Experience], gamma: f64, beta_q: f64) -> f64 {
    let (loss, grad) = critic_loss_and_gradient(nets, batch, gamma);
    opt.step(nets.critic.values_mut(), &grad, beta_q);
    loss
}

/// `J_p = −mean q̂(o, p̂(o))` and its gradient with respect to the actor.
pub fn actor_loss_and_gradient(nets: &AgentNets, batch: &[Experience]) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "actor update needs a non-empty batch");
    let n = batch.len();
    let obs = flatten_obs(batch.iter().map(|e| &e.o), n);
    let actor_cache = nets.actor.forward_batch(&obs, n).expect("actor shape");
    let rows = critic_rows(batch.iter().zip(actor_cache.output()).map(|(e, &a)| (e.o, a)), n);
    let critic_cache = nets.critic.forward_batch(&rows, n).expect("critic shape");
    let loss = -critic_cache.output().iter().sum::<f64>() / n as f64;
    let d_q = vec![-1.0 / n as f64; n];
    let d_rows = nets.critic.input_gradient(&critic_cache, &d_q).expect("cache matches");
    // the action is the last entry of each critic input row
    let d_action: Vec<f64> = d_rows.chunks_exact(CRITIC_INPUT).map(|r| r[OBS_DIM]).collect();
    let grads = nets.actor.backward(&actor_cache, &d_action).expect("cache matches");
    (loss, grads.params)
}

/// One actor step; the critic is left untouched. Returns `J_p` before the step.
pub fn actor_update(nets: &mut AgentNets, opt: &mut Optimizer, batch: &[Experience], beta_p: f64) -> f64 {
    let (loss, grad) = actor_loss_and_gradient(nets, batch);
    opt.step(nets.actor.values_mut(), &grad, beta_p);
    loss
}

/// `w̃ ← (1 − κ) w̃ + κ w` for both target networks.
pub fn soft_update(nets: &mut AgentNets, kappa: f64) {
    fn blend(target: &mut MlpParams, live: &MlpParams, kappa: f64) {
        for (t, w) in target.values_mut().iter_mut().zip(live.values()) {
            *t = (1.0 - kappa) * *t + kappa * w;
        }
    }
    blend(&mut nets.actor_target, &nets.actor, kappa);
    blend(&mut nets.critic_target, &nets.critic, kappa);
}
