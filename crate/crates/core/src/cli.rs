//! Command-line surface: `train`, `eval` and `sweep`.
//!
//! Every command writes plain CSV plus a small TOML manifest into its output
//! directory. Exit codes: 0 success, 2 configuration error, 3 plant fault,
//! 4 I/O error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dynamics::PlantError;
use crate::neural::{MlpParams, NeuralError};
use crate::runtime::{
    run_eval, run_training, run_training_realtime, write_convergence, EvalMetrics, MinuteStats, RuntimeError,
    TrainingOutcome, TrainingSinks, EVAL_HEADER,
};

pub const WEIGHTS_FILE: &str = "actor.lnrl";
pub const TRACE_FILE: &str = "trace.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const CAPTURE_FILE: &str = "capture.bin";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const EVAL_SERIES_FILE: &str = "eval_timeseries.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Incompatible(String),
    #[error("plant fault: {0}")]
    Fault(PlantError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io { .. }) => 4,
            CliError::Config(_) | CliError::Incompatible(_) => 2,
            CliError::Fault(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn runtime_err(path: &Path, e: RuntimeError) -> CliError {
    match e {
        RuntimeError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Incompatible(other.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "lnrl", version, about = "Pendulum swing-up with a bus-coupled actor-critic learner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent and write weights, trace, convergence and manifest.
    Train(TrainArgs),
    /// Roll out trained weights greedily from the hanging position.
    Eval(EvalArgs),
    /// Train and evaluate every (seed, rod length) pair and aggregate.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Deterministic single-thread simulation (default).
    #[arg(long, conflicts_with = "realtime")]
    pub lock_step: bool,
    /// Controller and learner on two threads paced by the wall clock.
    #[arg(long)]
    pub realtime: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Training duration override (s).
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub weights: PathBuf,
    /// Rollout length (s); defaults to the configured evaluation length.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Seed of the measurement noise.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Rod lengths (m).
    #[arg(long, value_delimiter = ',', default_value = "0.135,0.29")]
    pub lengths: Vec<f64>,
    /// Training duration override (s).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Parallel runs; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    code_version: &'a str,
    config_hash: String,
    seed: u64,
    mode: &'a str,
    steps: u64,
    updates: u64,
    published_version: u16,
    controller_version: u16,
    #[serde(skip_serializing_if = "Option::is_none")]
    fault: Option<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Trains one agent into `out`. Artifacts are written even when a plant
/// fault cuts the run short; the fault is then returned as the error.
pub fn cmd_train(cfg: &RunConfig, seed: u64, out: &Path, realtime: bool) -> Result<TrainingOutcome, CliError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;

    let trace_path = out.join(TRACE_FILE);
    let mut trace = create(&trace_path)?;
    let outcome = if realtime {
        run_training_realtime(cfg, seed, Some(&mut trace))
    } else if cfg.artifact.capture {
        let cap_path = out.join(CAPTURE_FILE);
        let mut cap = create(&cap_path)?;
        run_training(
            cfg,
            seed,
            TrainingSinks {
                trace: Some(&mut trace),
                capture: Some(&mut cap),
            },
        )
    } else {
        run_training(
            cfg,
            seed,
            TrainingSinks {
                trace: Some(&mut trace),
                capture: None,
            },
        )
    }
    .map_err(|e| runtime_err(&trace_path, e))?;
    drop(trace);

    let conv_path = out.join(CONVERGENCE_FILE);
    write_convergence(create(&conv_path)?, &outcome.convergence).map_err(io_err(&conv_path))?;
    let w_path = out.join(WEIGHTS_FILE);
    fs::write(&w_path, outcome.actor.to_bytes()).map_err(io_err(&w_path))?;
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed,
        mode: if realtime { "realtime" } else { "lock-step" },
        steps: outcome.steps,
        updates: outcome.updates,
        published_version: outcome.published_version,
        controller_version: outcome.controller_version,
        fault: outcome.fault.map(|f| f.to_string()),
    };
    let m_path = out.join(MANIFEST_FILE);
    fs::write(&m_path, toml::to_string(&manifest).expect("manifest serializes")).map_err(io_err(&m_path))?;

    match outcome.fault {
        Some(f) => Err(CliError::Fault(f)),
        None => Ok(outcome),
    }
}

pub fn load_weights(path: &Path, cfg: &RunConfig) -> Result<MlpParams, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let actor = MlpParams::from_bytes(&bytes, cfg.ddpg.leak).map_err(|e| match e {
        NeuralError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Incompatible(format!("{}: {other}", path.display())),
    })?;
    if actor.shapes() != cfg.actor_shapes().as_slice() {
        return Err(CliError::Incompatible(format!(
            "{} holds a {}-parameter actor with layer widths {:?}, but the config describes {:?}",
            path.display(),
            actor.param_count(),
            actor.shapes().iter().map(|s| s.out_dim).collect::<Vec<_>>(),
            cfg.actor_shapes().iter().map(|s| s.out_dim).collect::<Vec<_>>()
        )));
    }
    Ok(actor)
}

/// Evaluates `actor` and writes the metrics and time series into `out`.
pub fn cmd_eval(cfg: &RunConfig, actor: &MlpParams, duration: f64, seed: u64, out: &Path) -> Result<EvalMetrics, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (metrics, samples) = run_eval(cfg, actor, duration, seed).map_err(|e| runtime_err(out, e))?;
    let m_path = out.join(EVAL_METRICS_FILE);
    fs::write(&m_path, metrics.to_csv()).map_err(io_err(&m_path))?;
    let s_path = out.join(EVAL_SERIES_FILE);
    let mut w = create(&s_path)?;
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "{EVAL_HEADER}")?;
        for s in &samples {
            writeln!(w, "{}", s.csv_row())?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(&s_path))?;
    Ok(metrics)
}

/// Result of one (seed, length) cell of a sweep.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub l: f64,
    pub seed: u64,
    pub convergence: Vec<MinuteStats>,
    pub eval: Option<EvalMetrics>,
    pub error: Option<String>,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub fn final_mean_reward(&self, minutes: usize) -> Option<f64> {
        if self.convergence.is_empty() {
            return None;
        }
        let tail = &self.convergence[self.convergence.len().saturating_sub(minutes)..];
        Some(tail.iter().map(|m| m.mean_reward).sum::<f64>() / tail.len() as f64)
    }

    pub fn swung_up(&self) -> bool {
        self.eval.is_some_and(|m| m.swing_up_time.is_some())
    }

    /// Held the stabilization band for a full minute in evaluation.
    pub fn stabilized(&self) -> bool {
        self.eval.is_some_and(|m| m.longest_stabilized >= 60.0 - 1e-9)
    }
}

/// Per-minute mean ± std of the per-seed averages.
pub fn aggregate_curve(runs: &[&RunSummary]) -> Vec<MinuteStats> {
    let minutes = runs.iter().map(|r| r.convergence.len()).max().unwrap_or(0);
    (0..minutes)
        .filter_map(|i| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.convergence.get(i)).map(|m| m.mean_reward).collect();
            if vals.is_empty() {
                return None;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            Some(MinuteStats {
                minute: i + 1,
                mean_reward: mean,
                std_reward: var.sqrt(),
            })
        })
        .collect()
}

pub fn length_label(l: f64) -> String {
    format!("l{l}")
}

/// Trains and evaluates one (seed, length) cell; never fails, errors are
/// recorded in the summary.
pub fn sweep_cell(cfg: &RunConfig, seed: u64, l: f64, out: &Path) -> RunSummary {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.plant.l = l;
    let dir = out.join(format!("{}_seed{seed}", length_label(l)));
    let mut summary = RunSummary {
        l,
        seed,
        convergence: Vec::new(),
        eval: None,
        error: None,
        wall_seconds: 0.0,
    };
    match cmd_train(&cfg, seed, &dir, false) {
        Ok(outcome) => {
            summary.convergence = outcome.convergence;
            match cmd_eval(&cfg, &outcome.actor.narrowed(), cfg.artifact.eval_duration, seed, &dir) {
                Ok(m) => summary.eval = Some(m),
                Err(e) => summary.error = Some(format!("eval: {e}")),
            }
        }
        Err(e) => {
            log::error!("run l={l} seed={seed} failed: {e}");
            summary.error = Some(e.to_string());
        }
    }
    summary.wall_seconds = started.elapsed().as_secs_f64();
    summary
}

/// Runs every (seed, length) cell, `jobs` at a time.
pub fn run_cells(cfg: &RunConfig, cells: &[(u64, f64)], out: &Path, jobs: usize) -> Vec<RunSummary> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(seed, l)) = cells.get(i) else { break };
                let r = sweep_cell(cfg, seed, l, out);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Writes per-length aggregate curves and the success summary.
pub fn write_sweep_report(runs: &[RunSummary], lengths: &[f64], out: &Path) -> Result<String, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut summary = String::from("l,runs,swing_up,stabilized,final5_mean_reward,errors\n");
    for &l in lengths {
        let cell: Vec<&RunSummary> = runs.iter().filter(|r| r.l == l).collect();
        let curve = aggregate_curve(&cell);
        let path = out.join(format!("sweep_{}.csv", length_label(l)));
        write_convergence(create(&path)?, &curve).map_err(io_err(&path))?;
        let n = cell.len();
        let finals: Vec<f64> = cell.iter().filter_map(|r| r.final_mean_reward(5)).collect();
        let final_mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
        summary.push_str(&format!(
            "{l},{n},{}/{n},{}/{n},{final_mean},{}\n",
            cell.iter().filter(|r| r.swung_up()).count(),
            cell.iter().filter(|r| r.stabilized()).count(),
            cell.iter().filter(|r| r.error.is_some()).count(),
        ));
    }
    let path = out.join("sweep_summary.csv");
    fs::write(&path, &summary).map_err(io_err(&path))?;
    Ok(summary)
}

pub fn cmd_sweep(cfg: &RunConfig, seeds: &[u64], lengths: &[f64], out: &Path, jobs: usize) -> Result<Vec<RunSummary>, CliError> {
    if seeds.is_empty() || lengths.is_empty() {
        return Err(CliError::Incompatible("a sweep needs at least one seed and one length".into()));
    }
    cfg.validate()?;
    let cells: Vec<(u64, f64)> = lengths.iter().flat_map(|&l| seeds.iter().map(move |&s| (s, l))).collect();
    for &(_, l) in &cells {
        let mut c = cfg.clone();
        c.plant.l = l;
        c.validate()?;
    }
    let runs = run_cells(cfg, &cells, out, jobs);
    let summary = write_sweep_report(&runs, lengths, out)?;
    print!("{summary}");
    Ok(runs)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = load_config(a.common.config.as_deref())?;
            if let Some(d) = a.duration {
                cfg.ddpg.train_duration = d;
            }
            let outcome = cmd_train(&cfg, a.seed, &a.common.out, a.common.realtime)?;
            println!(
                "trained {} steps, {} updates, final-5-minute mean reward {:.4}",
                outcome.steps,
                outcome.updates,
                outcome.trailing_mean_reward(5)
            );
        }
        Command::Eval(a) => {
            let cfg = load_config(a.common.config.as_deref())?;
            let actor = load_weights(&a.weights, &cfg)?;
            let m = cmd_eval(&cfg, &actor, a.duration.unwrap_or(cfg.artifact.eval_duration), a.seed, &a.common.out)?;
            print!("{}", m.to_csv());
            if let Some(f) = m.fault {
                return Err(CliError::Fault(f));
            }
        }
        Command::Sweep(a) => {
            let mut cfg = load_config(a.common.config.as_deref())?;
            if let Some(d) = a.duration {
                cfg.ddpg.train_duration = d;
            }
            if a.common.realtime {
                log::warn!("sweeps always run lock-step");
            }
            cmd_sweep(&cfg, &a.seeds, &a.lengths, &a.common.out, a.jobs.unwrap_or_else(default_jobs))?;
        }
    }
    Ok(())
}
