//! Closed-loop orchestration.
//!
//! The controller endpoint runs the 50 Hz loop (measure, estimate, observe,
//! act, explore, safeguard, actuate, reward, transmit); the learner endpoint
//! turns received experiences into gradient updates and publishes actor
//! snapshots. The two only exchange CAN frames.
//!
//! In lock-step mode a single thread advances everything on the simulated
//! clock. Per control step `k` at `t = k·T_s`:
//!
//! 1. the bus runs up to `t`; weight frames that completed before `t` reach
//!    the controller, so new actors only take effect at step boundaries;
//! 2. the controller ticks and queues its frames at `t`;
//! 3. frames that completed exactly at `t` are handed out, the learner
//!    receives its share and runs one work quantum, queueing any
//!    publication at `t`;
//! 4. the plant integrates to `t + T_s`.
//!
//! Ties at one timestamp therefore resolve as tick, then delivery, then
//! learner quantum.

use std::io::{self, Write};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::agent::{
    act, actor_update, critic_update, rng_stream, soft_update, AgentNets, DdpgHyper, Experience, LinearSchedule,
    Optimizers, OuNoise, ReplayBuffer, RngStream,
};
use crate::config::RunConfig;
use crate::dynamics::{step_reduced, wrap_angle, PlantError, PlantLimits, PlantParams, PlantState};
use crate::estimation::{PllKind, VelocityEstimator};
use crate::link::{
    chunk_weights, encode_experience, BusModel, CaptureWriter, CanFrame, ExperienceDecoder, Message, Reassembly,
    WeightReassembler, ID_EXPERIENCE, ID_TELEMETRY, ID_WEIGHT_CHUNK, ID_WEIGHT_COMMIT,
};
use crate::neural::{MlpParams, NeuralError};
use crate::safeguard::{SafeguardConfig, SafeguardMode, SafeguardState};
use crate::task::{build_observation, denormalize_action, reward, Observation, RewardParams, RewardRegion, TaskLimits};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("{0}")]
    Invalid(String),
}

pub const TRACE_HEADER: &str = "step,t_s,x,v_hat,theta,omega_hat,a_agent,v_applied,r,region,safeguard_mode,weight_version";

/// One controller tick as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub step: u64,
    pub t: f64,
    pub x: f64,
    pub v_hat: f64,
    pub theta: f64,
    pub omega_hat: f64,
    /// Normalized agent command, after exploration noise, before the safeguard.
    pub a_agent: f64,
    pub v_applied: f64,
    /// Reward for the transition that ended at this tick.
    pub r: f64,
    pub region: RewardRegion,
    pub safeguard_mode: SafeguardMode,
    pub weight_version: u16,
}

impl TickRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.t,
            self.x,
            self.v_hat,
            self.theta,
            self.omega_hat,
            self.a_agent,
            self.v_applied,
            self.r,
            self.region.label(),
            self.safeguard_mode.label(),
            self.weight_version
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub v_applied: f64,
    pub experience: Option<Experience>,
    pub telemetry: Option<Message>,
    pub record: TickRecord,
}

/// Real-time side: estimators, actor snapshot, exploration and safeguard.
#[derive(Debug, Clone)]
pub struct ControllerEndpoint {
    limits: TaskLimits,
    reward_params: RewardParams,
    safeguard_cfg: SafeguardConfig,
    ts: f64,
    actor: MlpParams,
    version: u16,
    reassembler: WeightReassembler,
    est_x: VelocityEstimator,
    est_theta: VelocityEstimator,
    safeguard: SafeguardState,
    noise: OuNoise,
    /// Exploration schedule; `None` runs the actor greedily.
    sigma: Option<LinearSchedule>,
    rng: ChaCha8Rng,
    pending: Option<(Observation, f64)>,
    /// The previously applied command, after the safeguard.
    v_prev: f64,
    step: u64,
    seq: u32,
    telemetry_every: u64,
    telemetry_sum: f64,
}

impl ControllerEndpoint {
    /// `actor` is applied as version 0. With `explore` off no noise is added.
    pub fn new(cfg: &RunConfig, actor: MlpParams, seed: u64, explore: bool) -> Self {
        let pll = cfg.pll();
        let shapes = actor.shapes().to_vec();
        Self {
            limits: cfg.task_limits(),
            reward_params: cfg.reward_params(),
            safeguard_cfg: cfg.safeguard(),
            ts: cfg.ts(),
            actor,
            version: 0,
            reassembler: WeightReassembler::new(shapes, Some(0)),
            est_x: VelocityEstimator::new(PllKind::Linear, pll),
            est_theta: VelocityEstimator::new(PllKind::Angular, pll),
            safeguard: SafeguardState::default(),
            noise: OuNoise::new(cfg.ddpg.mu, cfg.ddpg.sigma_init, cfg.ts()),
            sigma: (explore && cfg.artifact.exploration_noise).then(|| cfg.sigma_schedule()),
            rng: rng_stream(seed, RngStream::Exploration),
            pending: None,
            v_prev: 0.0,
            step: 0,
            seq: 0,
            telemetry_every: cfg.artifact.telemetry_every,
            telemetry_sum: 0.0,
        }
    }

    pub fn actor(&self) -> &MlpParams {
        &self.actor
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    pub fn safeguard_mode(&self) -> SafeguardMode {
        self.safeguard.mode
    }

    /// Feeds one downstream frame. Returns the version if it completed a sync.
    pub fn receive(&mut self, frame: &CanFrame) -> Option<u16> {
        if frame.id != ID_WEIGHT_CHUNK && frame.id != ID_WEIGHT_COMMIT {
            return None;
        }
        let msg = match Message::from_frame(frame) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("controller dropped frame: {e}");
                return None;
            }
        };
        match self.reassembler.push(&msg) {
            Reassembly::Applied { version, params } => {
                self.actor = params;
                self.version = version;
                Some(version)
            }
            Reassembly::Discarded { version, reason } => {
                log::debug!("weight version {version} discarded: {reason}");
                None
            }
            Reassembly::Pending => None,
        }
    }

    /// One control period on the measurements `(x, θ)`.
    pub fn tick(&mut self, x: f64, theta: f64) -> TickOutput {
        let t = self.step as f64 * self.ts;
        let theta = wrap_angle(theta);
        let v_hat = self.est_x.update(x, self.ts);
        let omega_hat = self.est_theta.update(theta, self.ts);
        let o = build_observation(x, v_hat, theta, omega_hat, self.v_prev, &self.limits);

        // the noise process advances even while the safeguard overrides
        let n = match &self.sigma {
            Some(schedule) => {
                self.noise.sigma = schedule.at(t);
                self.noise.step(&mut self.rng)
            }
            None => 0.0,
        };
        let a = act(&self.actor, &o) + n;
        let v_cmd = denormalize_action(a, self.limits.v_max);

        // reward of the transition (o_{k-1}, a_{k-1}) → o_k
        let prev_cmd = self.pending.map_or(0.0, |(_, pa)| denormalize_action(pa, self.limits.v_max));
        let (r, region) = reward(prev_cmd, theta, omega_hat, x, &self.limits, &self.reward_params);
        let experience = self.pending.map(|(po, pa)| Experience { o: po, a: pa, r, o_next: o });

        let out = self.safeguard.apply(&self.safeguard_cfg, x, omega_hat, v_cmd);
        self.pending = Some((o, a));
        self.v_prev = out.v_cmd;

        self.telemetry_sum += r;
        let telemetry = ((self.step + 1) % self.telemetry_every == 0).then(|| {
            let mean = self.telemetry_sum / self.telemetry_every as f64;
            self.telemetry_sum = 0.0;
            Message::Telemetry {
                step: self.step as u32,
                reward: mean as f32,
            }
        });

        let record = TickRecord {
            step: self.step,
            t,
            x,
            v_hat,
            theta,
            omega_hat,
            a_agent: a,
            v_applied: out.v_cmd,
            r,
            region,
            safeguard_mode: out.mode,
            weight_version: self.version,
        };
        self.step += 1;
        TickOutput {
            v_applied: out.v_cmd,
            experience,
            telemetry,
            record,
        }
    }

    /// Wire frames for this tick's experience, if any.
    pub fn experience_frames(&mut self, e: &Experience) -> Vec<CanFrame> {
        let frames = encode_experience(e, self.seq);
        self.seq = self.seq.wrapping_add(1);
        frames
    }
}

/// Learning side: replay memory, networks and the publication cadence.
#[derive(Debug, Clone)]
pub struct LearnerEndpoint {
    nets: AgentNets,
    opts: Optimizers,
    buffer: ReplayBuffer,
    hyper: DdpgHyper,
    rng: ChaCha8Rng,
    decoder: ExperienceDecoder,
    publish_every: u64,
    updates: u64,
    publish_due: bool,
    version: u16,
    incomplete: u64,
    last_losses: Option<(f64, f64)>,
    last_telemetry: Option<(u32, f32)>,
}

impl LearnerEndpoint {
    pub fn new(cfg: &RunConfig, nets: AgentNets, seed: u64) -> Self {
        let opts = Optimizers::new(cfg.artifact.optimizer, &nets);
        Self {
            nets,
            opts,
            buffer: ReplayBuffer::new(cfg.ddpg.memory_size),
            hyper: cfg.hyper(),
            rng: rng_stream(seed, RngStream::Sampling),
            decoder: ExperienceDecoder::new(),
            publish_every: cfg.artifact.publish_every,
            updates: 0,
            publish_due: false,
            version: 0,
            incomplete: 0,
            last_losses: None,
            last_telemetry: None,
        }
    }

    pub fn nets(&self) -> &AgentNets {
        &self.nets
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn published_version(&self) -> u16 {
        self.version
    }

    /// Experience records lost to dropped frames.
    pub fn incomplete(&self) -> u64 {
        self.incomplete
    }

    /// Critic and actor loss of the latest update.
    pub fn last_losses(&self) -> Option<(f64, f64)> {
        self.last_losses
    }

    pub fn last_telemetry(&self) -> Option<(u32, f32)> {
        self.last_telemetry
    }

    /// Feeds one upstream frame.
    pub fn receive(&mut self, frame: &CanFrame) {
        match frame.id {
            ID_EXPERIENCE => match self.decoder.push(frame) {
                Some(Ok(d)) => self.remember(d.experience),
                Some(Err(e)) => {
                    self.incomplete += 1;
                    log::debug!("learner dropped record: {e}");
                }
                None => {}
            },
            ID_TELEMETRY => {
                if let Ok(Message::Telemetry { step, reward }) = Message::from_frame(frame) {
                    self.last_telemetry = Some((step, reward));
                }
            }
            _ => {}
        }
    }

    pub fn remember(&mut self, e: Experience) {
        if e.is_finite() {
            self.buffer.remember(e);
        } else {
            log::warn!("non-finite experience ignored");
        }
    }

    /// One work quantum at training time `t`: at most one critic, actor and
    /// target update. A due publication waits while `link_busy` reports the
    /// previous one still in transit.
    pub fn quantum(&mut self, t: f64, link_busy: bool) -> Vec<Message> {
        if let Ok(batch) = self.buffer.sample_batch(self.hyper.batch_size, &mut self.rng) {
            let jq = critic_update(&mut self.nets, &mut self.opts.critic, &batch, self.hyper.gamma, self.hyper.beta_q.at(t));
            let jp = actor_update(&mut self.nets, &mut self.opts.actor, &batch, self.hyper.beta_p.at(t));
            soft_update(&mut self.nets, self.hyper.kappa);
            self.last_losses = Some((jq, jp));
            self.updates += 1;
            if self.updates % self.publish_every == 0 {
                self.publish_due = true;
            }
        }
        if !self.publish_due || link_busy {
            return Vec::new();
        }
        let Some(version) = self.version.checked_add(1) else {
            log::warn!("weight version space exhausted; publication stopped");
            self.publish_due = false;
            return Vec::new();
        };
        match chunk_weights(&self.nets.actor, version) {
            Ok(msgs) => {
                self.version = version;
                self.nets.next_version();
                self.publish_due = false;
                msgs
            }
            Err(e) => {
                log::error!("cannot publish actor: {e}");
                self.publish_due = false;
                Vec::new()
            }
        }
    }
}

/// The simulated plant together with its measurement channel.
#[derive(Debug, Clone)]
pub struct PlantSim {
    params: PlantParams,
    limits: PlantLimits,
    pub state: PlantState,
    noise: Option<(f64, f64)>,
    rng: ChaCha8Rng,
    ts: f64,
}

impl PlantSim {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        let a = &cfg.artifact;
        Self {
            params: cfg.plant_params(),
            limits: cfg.plant_limits(),
            state: PlantState::hanging(),
            noise: a.measurement_noise.then_some((a.sigma_x, a.sigma_theta)),
            rng: rng_stream(seed, RngStream::Measurement),
            ts: cfg.ts(),
        }
    }

    pub fn measure(&mut self) -> (f64, f64) {
        let (x, theta) = (self.state.x, self.state.theta);
        match self.noise {
            Some((sx, st)) => {
                let nx: f64 = self.rng.sample(StandardNormal);
                let nt: f64 = self.rng.sample(StandardNormal);
                (x + sx * nx, wrap_angle(theta + st * nt))
            }
            None => (x, theta),
        }
    }

    pub fn advance(&mut self, v_cmd: f64) -> Result<(), PlantError> {
        self.state = step_reduced(&self.params, &self.limits, &self.state, v_cmd, self.ts)?;
        Ok(())
    }
}

/// Mean and standard deviation of the per-tick reward over one minute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinuteStats {
    pub minute: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
}

#[derive(Debug, Clone, Default)]
struct MinuteAccumulator {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl MinuteAccumulator {
    fn push(&mut self, r: f64) {
        self.n += 1;
        self.sum += r;
        self.sum_sq += r * r;
    }

    fn finish(&mut self, minute: usize) -> MinuteStats {
        let mean = self.sum / self.n as f64;
        let var = (self.sum_sq / self.n as f64 - mean * mean).max(0.0);
        *self = Self::default();
        MinuteStats {
            minute,
            mean_reward: mean,
            std_reward: var.sqrt(),
        }
    }
}

pub fn write_convergence<W: Write>(mut w: W, rows: &[MinuteStats]) -> io::Result<()> {
    writeln!(w, "minute,mean_reward,std_reward")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.minute, r.mean_reward, r.std_reward)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkStats {
    pub frames_delivered: u64,
    pub frames_dropped: u64,
    pub busy_bits: u64,
    pub incomplete_experiences: u64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub convergence: Vec<MinuteStats>,
    /// Learner's live actor at the end of training.
    pub actor: MlpParams,
    pub controller_version: u16,
    pub published_version: u16,
    pub updates: u64,
    pub steps: u64,
    pub fault: Option<PlantError>,
    pub link: LinkStats,
}

impl TrainingOutcome {
    /// Mean of the per-minute averages over the trailing `minutes`.
    pub fn trailing_mean_reward(&self, minutes: usize) -> f64 {
        let tail = &self.convergence[self.convergence.len().saturating_sub(minutes)..];
        tail.iter().map(|m| m.mean_reward).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Optional artifact streams for a training run.
#[derive(Default)]
pub struct TrainingSinks<'a> {
    pub trace: Option<&'a mut dyn Write>,
    pub capture: Option<&'a mut dyn Write>,
}

fn initial_nets(cfg: &RunConfig, seed: u64) -> Result<AgentNets, RuntimeError> {
    let mut rng = rng_stream(seed, RngStream::WeightInit);
    Ok(AgentNets::init(cfg.actor_shapes(), cfg.critic_shapes(), &mut rng)?)
}

fn ticks_per_minute(cfg: &RunConfig) -> u64 {
    (60.0 * cfg.plant.f_s).round() as u64
}

/// Deterministic lock-step training run.
pub fn run_training(cfg: &RunConfig, seed: u64, sinks: TrainingSinks<'_>) -> Result<TrainingOutcome, RuntimeError> {
    cfg.validate().map_err(|e| RuntimeError::Invalid(e.to_string()))?;
    let TrainingSinks { mut trace, capture } = sinks;
    let mut capture = capture.map(CaptureWriter::new);
    if let Some(w) = trace.as_mut() {
        writeln!(w, "{TRACE_HEADER}")?;
    }

    let nets = initial_nets(cfg, seed)?;
    let mut controller = ControllerEndpoint::new(cfg, nets.actor.narrowed(), seed, true);
    let mut learner = LearnerEndpoint::new(cfg, nets, seed);
    let mut plant = PlantSim::new(cfg, seed);
    let mut bus = BusModel::new(cfg.artifact.bit_rate);
    if cfg.artifact.link_drop_probability > 0.0 {
        bus = bus.with_losses(cfg.artifact.link_drop_probability, rng_stream(seed, RngStream::Link));
    }

    let ts = cfg.ts();
    let steps = cfg.steps();
    let per_minute = ticks_per_minute(cfg);
    let mut convergence = Vec::new();
    let mut acc = MinuteAccumulator::default();
    let mut delivered = 0u64;
    let mut fault = None;
    let mut done = 0;
    let started = Instant::now();

    for k in 0..steps {
        let t = k as f64 * ts;
        let deliveries = bus.step(t);
        delivered += deliveries.len() as u64;
        if let Some(c) = capture.as_mut() {
            for d in &deliveries {
                c.record(d)?;
            }
        }
        let split = deliveries.partition_point(|d| d.time < t);
        for d in &deliveries[..split] {
            controller.receive(&d.frame);
        }

        let (x, theta) = plant.measure();
        let out = controller.tick(x, theta);
        if let Some(e) = out.experience {
            for f in controller.experience_frames(&e) {
                bus.enqueue(f, t);
            }
        }
        if let Some(m) = &out.telemetry {
            for f in m.to_frames().expect("telemetry fits one frame") {
                bus.enqueue(f, t);
            }
        }
        if let Some(w) = trace.as_mut() {
            writeln!(w, "{}", out.record.csv_row())?;
        }
        acc.push(out.record.r);

        for d in &deliveries[split..] {
            controller.receive(&d.frame);
        }
        for d in &deliveries {
            learner.receive(&d.frame);
        }
        let busy = bus.pending_with_id(ID_WEIGHT_CHUNK) + bus.pending_with_id(ID_WEIGHT_COMMIT) > 0;
        for m in learner.quantum(t, busy) {
            for f in m.to_frames().expect("weight messages fit one frame") {
                bus.enqueue(f, t);
            }
        }

        done = k + 1;
        if done % per_minute == 0 {
            let m = acc.finish(convergence.len() + 1);
            log::info!(
                "seed {seed} minute {:>3}: mean reward {:+.4} (actor v{}, {:.0} s elapsed)",
                m.minute,
                m.mean_reward,
                controller.version(),
                started.elapsed().as_secs_f64()
            );
            convergence.push(m);
        }
        if let Err(e) = plant.advance(out.v_applied) {
            log::error!("seed {seed}: plant fault at step {k}: {e}");
            fault = Some(e);
            break;
        }
    }
    if acc.n > 0 {
        convergence.push(acc.finish(convergence.len() + 1));
    }
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }
    if let Some(c) = capture {
        c.into_inner().flush()?;
    }

    Ok(TrainingOutcome {
        convergence,
        actor: learner.nets().actor.clone(),
        controller_version: controller.version(),
        published_version: learner.published_version(),
        updates: learner.updates(),
        steps: done,
        fault,
        link: LinkStats {
            frames_delivered: delivered,
            frames_dropped: bus.dropped(),
            busy_bits: bus.busy_bits(),
            incomplete_experiences: learner.incomplete(),
        },
    })
}

/// Wall-clock training: controller and learner on separate threads joined
/// only by frame queues. The controller ticks every `T_s` of real time for
/// the configured training duration; the learner updates as fast as it can.
/// Not reproducible; the lock-step [`run_training`] is the reference.
pub fn run_training_realtime(cfg: &RunConfig, seed: u64, trace: Option<&mut dyn Write>) -> Result<TrainingOutcome, RuntimeError> {
    cfg.validate().map_err(|e| RuntimeError::Invalid(e.to_string()))?;
    let nets = initial_nets(cfg, seed)?;
    let mut controller = ControllerEndpoint::new(cfg, nets.actor.narrowed(), seed, true);
    let learner = LearnerEndpoint::new(cfg, nets, seed);
    let (up_tx, up_rx) = mpsc::channel::<CanFrame>();
    let (down_tx, down_rx) = mpsc::channel::<CanFrame>();
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let period = Duration::from_secs_f64(cfg.ts());
    let steps = cfg.steps();
    let per_minute = ticks_per_minute(cfg);

    let learner_thread = std::thread::spawn(move || {
        let mut learner = learner;
        let start = Instant::now();
        loop {
            if stop_rx.try_recv().is_ok() {
                break;
            }
            let mut got = false;
            while let Ok(f) = up_rx.try_recv() {
                learner.receive(&f);
                got = true;
            }
            if learner.buffer().len() < learner.hyper.batch_size && !got {
                std::thread::sleep(Duration::from_millis(1));
                continue;
            }
            for m in learner.quantum(start.elapsed().as_secs_f64(), false) {
                for f in m.to_frames().expect("weight messages fit one frame") {
                    if down_tx.send(f).is_err() {
                        return learner;
                    }
                }
            }
        }
        learner
    });

    let mut plant = PlantSim::new(cfg, seed);
    let mut trace = trace;
    if let Some(w) = trace.as_mut() {
        writeln!(w, "{TRACE_HEADER}")?;
    }
    let mut convergence = Vec::new();
    let mut acc = MinuteAccumulator::default();
    let mut fault = None;
    let mut done = 0;
    let mut frames = 0u64;
    let mut deadline = Instant::now();
    for k in 0..steps {
        while let Ok(f) = down_rx.try_recv() {
            frames += 1;
            controller.receive(&f);
        }
        let (x, theta) = plant.measure();
        let out = controller.tick(x, theta);
        let mut outbound = Vec::new();
        if let Some(e) = out.experience {
            outbound.extend(controller.experience_frames(&e));
        }
        if let Some(m) = &out.telemetry {
            outbound.extend(m.to_frames().expect("telemetry fits one frame"));
        }
        for f in outbound {
            frames += 1;
            let _ = up_tx.send(f);
        }
        if let Some(w) = trace.as_mut() {
            writeln!(w, "{}", out.record.csv_row())?;
        }
        acc.push(out.record.r);
        done = k + 1;
        if done % per_minute == 0 {
            convergence.push(acc.finish(convergence.len() + 1));
        }
        if let Err(e) = plant.advance(out.v_applied) {
            fault = Some(e);
            break;
        }
        deadline += period;
        if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    if acc.n > 0 {
        convergence.push(acc.finish(convergence.len() + 1));
    }
    let _ = stop_tx.send(());
    let learner = learner_thread
        .join()
        .map_err(|_| RuntimeError::Invalid("learner thread panicked".into()))?;
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }
    Ok(TrainingOutcome {
        convergence,
        actor: learner.nets().actor.clone(),
        controller_version: controller.version(),
        published_version: learner.published_version(),
        updates: learner.updates(),
        steps: done,
        fault,
        link: LinkStats {
            frames_delivered: frames,
            incomplete_experiences: learner.incomplete(),
            ..LinkStats::default()
        },
    })
}

/// Evaluation summary. Angles and positions are the true plant values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub duration: f64,
    /// Time of the first tick with |θ| below the upright threshold.
    pub swing_up_time: Option<f64>,
    /// Fraction of the final minute (or the whole run, if shorter) spent
    /// within the stabilization band.
    pub stabilized_fraction: f64,
    /// RMS distance to the reference position.
    pub x_rms: f64,
    /// Longest uninterrupted stay within the stabilization band (s).
    pub longest_stabilized: f64,
    pub fault: Option<PlantError>,
}

impl EvalMetrics {
    pub fn to_csv(&self) -> String {
        let swing = self.swing_up_time.map_or(String::new(), |t| t.to_string());
        format!(
            "duration_s,swing_up_time_s,stabilized_fraction,x_rms,longest_stabilized_s,fault\n{},{},{},{},{},{}\n",
            self.duration,
            swing,
            self.stabilized_fraction,
            self.x_rms,
            self.longest_stabilized,
            self.fault.map_or(String::new(), |f| f.to_string().replace(',', ";"))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSample {
    pub t: f64,
    pub x: f64,
    pub theta: f64,
    pub v_cmd: f64,
    pub safeguard_active: bool,
}

pub const EVAL_HEADER: &str = "t_s,x,theta,v_cmd,safeguard";

impl EvalSample {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.t, self.x, self.theta, self.v_cmd, u8::from(self.safeguard_active))
    }
}

/// Greedy rollout of `actor` from the hanging position, no learning.
pub fn run_eval(cfg: &RunConfig, actor: &MlpParams, duration: f64, seed: u64) -> Result<(EvalMetrics, Vec<EvalSample>), RuntimeError> {
    cfg.validate().map_err(|e| RuntimeError::Invalid(e.to_string()))?;
    if actor.shapes() != cfg.actor_shapes().as_slice() {
        return Err(RuntimeError::Invalid(format!(
            "actor layout {:?} does not match the configured {:?}",
            actor.shapes().iter().map(|s| (s.in_dim, s.out_dim)).collect::<Vec<_>>(),
            cfg.actor_shapes().iter().map(|s| (s.in_dim, s.out_dim)).collect::<Vec<_>>()
        )));
    }
    let ts = cfg.ts();
    let steps = (duration / ts).round() as usize;
    let window = ((60.0 / ts).round() as usize).min(steps);
    let theta_thresh = cfg.framework.theta_thresh;
    let band = cfg.artifact.stabilized_theta;
    let mut controller = ControllerEndpoint::new(cfg, actor.clone(), seed, false);
    let mut plant = PlantSim::new(cfg, seed);
    let mut samples = Vec::with_capacity(steps);
    let mut swing_up_time = None;
    let (mut run, mut best, mut in_window, mut sq) = (0usize, 0usize, 0usize, 0.0);
    let mut fault = None;
    for k in 0..steps {
        let s = plant.state;
        let t = k as f64 * ts;
        let (x, theta) = plant.measure();
        let out = controller.tick(x, theta);
        let upright = s.theta.abs() < band;
        if swing_up_time.is_none() && s.theta.abs() < theta_thresh {
            swing_up_time = Some(t);
        }
        run = if upright { run + 1 } else { 0 };
        best = best.max(run);
        if k >= steps - window && upright {
            in_window += 1;
        }
        sq += (s.x - cfg.framework.x_ref).powi(2);
        samples.push(EvalSample {
            t,
            x: s.x,
            theta: s.theta,
            v_cmd: out.v_applied,
            safeguard_active: out.record.safeguard_mode != SafeguardMode::Inactive,
        });
        if let Err(e) = plant.advance(out.v_applied) {
            fault = Some(e);
            break;
        }
    }
    let n = samples.len();
    let metrics = EvalMetrics {
        duration: n as f64 * ts,
        swing_up_time,
        stabilized_fraction: if window > 0 { in_window as f64 / window as f64 } else { 0.0 },
        x_rms: if n > 0 { (sq / n as f64).sqrt() } else { 0.0 },
        longest_stabilized: best as f64 * ts,
        fault,
    };
    Ok((metrics, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::OBS_DIM;

    fn short_cfg(seconds: f64) -> RunConfig {
        let mut c = RunConfig::default();
        c.ddpg.train_duration = seconds;
        c.ddpg.actor_hidden = vec![16, 16];
        c.ddpg.critic_hidden = vec![32, 32];
        c.ddpg.batch_size = 16;
        c
    }

    fn zero_actor(cfg: &RunConfig) -> MlpParams {
        MlpParams::zeros(cfg.actor_shapes()).unwrap()
    }

    #[test]
    fn first_tick_emits_nothing_then_experiences_chain() {
        let cfg = short_cfg(10.0);
        let mut c = ControllerEndpoint::new(&cfg, zero_actor(&cfg), 1, true);
        let first = c.tick(0.0, std::f64::consts::PI);
        assert!(first.experience.is_none());
        let mut prev: Option<Experience> = None;
        for k in 0..20 {
            let out = c.tick(0.001 * k as f64, 3.0);
            let e = out.experience.unwrap();
            if let Some(p) = prev {
                assert_eq!(p.o_next, e.o);
            }
            prev = Some(e);
        }
    }

    #[test]
    fn stored_action_is_pre_safeguard() {
        let cfg = short_cfg(10.0);
        // bias the actor output to +2 so that it requests 1 m/s
        let mut actor = zero_actor(&cfg);
        let n = actor.param_count();
        actor.values_mut()[n - 1] = 2.0;
        let mut c = ControllerEndpoint::new(&cfg, actor, 1, false);
        let out0 = c.tick(0.165, 3.0);
        assert_eq!(out0.record.safeguard_mode, SafeguardMode::Centering);
        assert_eq!(out0.v_applied, -0.5);
        assert_eq!(out0.record.a_agent, 2.0);
        let out1 = c.tick(0.16, 3.0);
        let e = out1.experience.unwrap();
        assert_eq!(e.a, 2.0);
        // the reward rates the commanded 1 m/s, not the applied override
        assert_eq!(out1.record.region, RewardRegion::InputViolation);
        // the observation carries the applied command
        assert_eq!(e.o_next[5], -1.0);
    }

    #[test]
    fn braking_tick_applies_zero() {
        let cfg = short_cfg(10.0);
        let mut actor = zero_actor(&cfg);
        let n = actor.param_count();
        actor.values_mut()[n - 1] = 0.3;
        let mut c = ControllerEndpoint::new(&cfg, actor, 1, false);
        // a fast-rotating angle drives ω̂ past the braking threshold
        let mut braked = None;
        for k in 0..50 {
            let out = c.tick(0.0, wrap_angle(25.0 * 0.02 * k as f64));
            if out.record.safeguard_mode == SafeguardMode::Braking {
                braked = Some(out);
                break;
            }
        }
        let out = braked.expect("braking engaged");
        assert_eq!(out.v_applied, 0.0);
        assert!(out.record.omega_hat.abs() >= 6.0 * std::f64::consts::PI);
    }

    #[test]
    fn learner_idle_on_empty_buffer_and_publishes_on_cadence() {
        let cfg = short_cfg(10.0);
        let nets = initial_nets(&cfg, 3).unwrap();
        let mut l = LearnerEndpoint::new(&cfg, nets, 3);
        assert!(l.quantum(0.0, false).is_empty());
        assert_eq!(l.updates(), 0);
        for i in 0..cfg.ddpg.batch_size {
            let v = i as f64 * 0.01;
            l.remember(Experience { o: [v; OBS_DIM], a: v, r: -v, o_next: [v; OBS_DIM] });
        }
        for _ in 0..24 {
            assert!(l.quantum(0.0, false).is_empty());
        }
        let msgs = l.quantum(0.0, false);
        let commits = msgs.iter().filter(|m| matches!(m, Message::WeightCommit { .. })).count();
        assert_eq!(commits, 1);
        assert_eq!(l.published_version(), 1);
        // a due publication waits for the link
        for _ in 0..25 {
            assert!(l.quantum(0.0, true).is_empty());
        }
        assert_eq!(l.quantum(0.0, false).len(), msgs.len());
        assert_eq!(l.published_version(), 2);
    }

    #[test]
    fn training_is_deterministic_and_syncs_weights() {
        let cfg = short_cfg(20.0);
        let run = |seed| {
            let mut trace = Vec::new();
            let out = run_training(&cfg, seed, TrainingSinks { trace: Some(&mut trace), capture: None }).unwrap();
            (out, trace)
        };
        let (a, ta) = run(5);
        let (b, tb) = run(5);
        assert_eq!(ta, tb);
        assert_eq!(a.actor.to_bytes(), b.actor.to_bytes());
        assert_eq!(a.steps, 1000);
        assert!(a.fault.is_none());
        assert!(a.updates > 900);
        assert!(a.controller_version >= 1 && a.controller_version <= a.published_version);
        assert_eq!(a.link.incomplete_experiences, 0);
        let text = String::from_utf8(ta).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRACE_HEADER);
        assert_eq!(text.lines().count(), 1001);
        let (c, _) = run(6);
        assert_ne!(a.actor.to_bytes(), c.actor.to_bytes());
    }

    #[test]
    fn convergence_rows_per_minute() {
        let mut cfg = short_cfg(150.0);
        cfg.ddpg.actor_hidden = vec![4];
        cfg.ddpg.critic_hidden = vec![4];
        let out = run_training(&cfg, 1, TrainingSinks::default()).unwrap();
        assert_eq!(out.convergence.len(), 3);
        let r_max = 1.0 - cfg.ddpg.gamma;
        assert!(out.convergence.iter().all(|m| m.mean_reward <= r_max && m.std_reward >= 0.0));
    }

    #[test]
    fn lossy_link_still_trains() {
        let mut cfg = short_cfg(10.0);
        cfg.artifact.link_drop_probability = 0.01;
        let out = run_training(&cfg, 2, TrainingSinks::default()).unwrap();
        assert!(out.link.frames_dropped > 0);
        assert!(out.link.incomplete_experiences > 0);
        assert!(out.updates > 0);
    }

    #[test]
    fn eval_edge_cases() {
        let cfg = short_cfg(10.0);
        let actor = zero_actor(&cfg);
        let (m, s) = run_eval(&cfg, &actor, 0.0, 1).unwrap();
        assert!(s.is_empty());
        assert_eq!((m.swing_up_time, m.stabilized_fraction, m.duration), (None, 0.0, 0.0));
        let (m, s) = run_eval(&cfg, &actor, 10.0, 1).unwrap();
        assert_eq!(s.len(), 500);
        assert_eq!(m.stabilized_fraction, 0.0);
        assert!(m.swing_up_time.is_none());
        let wrong = MlpParams::zeros(crate::agent::actor_layers(&[3], 0.3)).unwrap();
        assert!(run_eval(&cfg, &wrong, 1.0, 1).is_err());
    }

    #[test]
    fn realtime_mode_runs() {
        let cfg = short_cfg(1.0);
        let out = run_training_realtime(&cfg, 1, None).unwrap();
        assert_eq!(out.steps, 50);
        assert!(out.fault.is_none());
    }
}
