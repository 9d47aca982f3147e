//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 6`.

use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use lnrl::agent::{actor_layers, critic_layers, critic_update, soft_update, AgentNets, Experience, Optimizer, OptimizerKind};
use lnrl::cli::{cmd_train, default_jobs, run_cells, RunSummary, CONVERGENCE_FILE, TRACE_FILE, WEIGHTS_FILE};
use lnrl::config::RunConfig;
use lnrl::dynamics::{step_reduced, wrap_angle, PlantLimits, PlantParams, PlantState};
use lnrl::estimation::{PllConfig, PllKind, VelocityEstimator};
use lnrl::link::{
    chunk_weights, decode_experience, encode_experience, BusModel, CanFrame, Message, BIT_RATE, EXPERIENCE_FRAMES,
};
use lnrl::neural::{dense_stack, Activation, MlpParams};
use lnrl::safeguard::{SafeguardConfig, SafeguardMode, SafeguardState};
use lnrl::task::{reward, RewardRegion, OBS_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 8] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "velocity estimator tracking", estimator_tracking),
        (3, "reward codomains", reward_codomains),
        (4, "swing-up training", swing_up_training),
        (5, "safeguard safety", safeguard_safety),
        (6, "link timing", link_timing),
        (7, "determinism", determinism),
        (8, "critic oracle", critic_oracle),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {n} {}: {name} — {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

/// Weighted output sum and the side of every LeakyReLU kink each hidden
/// unit sits on.
fn probe(net: &MlpParams, input: &[f64], weights: &[f64], batch: usize) -> (f64, Vec<bool>) {
    let cache = net.forward_batch(input, batch).unwrap();
    let loss = cache.output().iter().zip(weights).map(|(y, c)| y * c).sum();
    let mut sides = Vec::new();
    for (i, spec) in net.shapes().iter().enumerate() {
        if matches!(spec.activation, Activation::LeakyRelu(_)) {
            sides.extend(cache.pre_activations(i).iter().map(|&z| z > 0.0));
        }
    }
    (loss, sides)
}

fn gradient_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nets: Vec<MlpParams> = vec![
        MlpParams::init(actor_layers(&[128, 128], 0.3), &mut rng).unwrap(),
        MlpParams::init(critic_layers(&[200, 200, 200, 200], 0.3), &mut rng).unwrap(),
    ];
    while nets.len() < 20 {
        let depth = rng.gen_range(0..4);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..24)).collect();
        let shapes = dense_stack(rng.gen_range(1..10), &hidden, rng.gen_range(1..4), rng.gen_range(0.05..0.5));
        // a leak near zero starves dead units of gradient, down to where
        // the h = 1e-6 difference is pure round-off
        let mut net = MlpParams::init(shapes, &mut rng).unwrap();
        // non-zero biases so every parameter has a generic gradient
        for v in net.values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        nets.push(net);
    }
    let h = 1e-6;
    let (mut worst, mut checked, mut straddled) = (0.0f64, 0usize, 0usize);
    for net in &mut nets {
        let batch = 3;
        let input: Vec<f64> = (0..batch * net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..batch * net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = net.forward_batch(&input, batch).unwrap();
        let grads = net.backward(&cache, &weights).unwrap();
        let n = net.param_count();
        let indices: Vec<usize> = if n <= 2000 {
            (0..n).collect()
        } else {
            (0..400).map(|_| rng.gen_range(0..n)).collect()
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        // a difference whose two probes straddle a kink measures the kink,
        // not the derivative
        let mut check = |analytic: f64, up: (f64, Vec<bool>), down: (f64, Vec<bool>)| {
            checked += 1;
            if up.1 != down.1 {
                straddled += 1;
            } else {
                worst = worst.max(rel(analytic, (up.0 - down.0) / (2.0 * h)));
            }
        };
        for i in indices {
            let orig = net.values()[i];
            net.values_mut()[i] = orig + h;
            let up = probe(net, &input, &weights, batch);
            net.values_mut()[i] = orig - h;
            let down = probe(net, &input, &weights, batch);
            net.values_mut()[i] = orig;
            check(grads.params[i], up, down);
        }
        for j in 0..input.len() {
            let mut x = input.clone();
            x[j] += h;
            let up = probe(net, &x, &weights, batch);
            x[j] -= 2.0 * h;
            let down = probe(net, &x, &weights, batch);
            check(grads.d_input[j], up, down);
        }
    }
    verdict(
        worst < 1e-4 && straddled * 100 <= checked,
        format!(
            "{} nets, {checked} partials ({straddled} straddling a kink, skipped), max relative error {worst:.2e}",
            nets.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn estimator_tracking() -> Verdict {
    let ts = 0.02;
    let cfg = PllConfig::new(7.0, 1.0).unwrap();
    let mut lin = VelocityEstimator::new(PllKind::Linear, cfg);
    let mut ramp_err = 0.0f64;
    for k in 0..=(10.0 / ts) as usize {
        let t = k as f64 * ts;
        let v = lin.update(0.1 * t, ts);
        if t >= 2.0 {
            ramp_err = ramp_err.max((v - 0.1).abs());
        }
    }
    // angular: ±0.5 rad/s through several ±π wraps, checked after settling
    let mut wrap_dev = 0.0f64;
    let mut wraps = 0;
    for rate in [0.5, -0.5] {
        let mut ang = VelocityEstimator::new(PllKind::Angular, cfg);
        let mut prev = 0.0;
        for k in 0..=(40.0 / ts) as usize {
            let t = k as f64 * ts;
            let theta = wrap_angle(rate * t);
            if (theta - prev).abs() > PI {
                wraps += 1;
            }
            prev = theta;
            let w = ang.update(theta, ts);
            if t >= 3.0 {
                wrap_dev = wrap_dev.max((w - rate).abs() / rate.abs());
            }
        }
    }
    verdict(
        ramp_err < 1e-3 && wrap_dev <= 0.02 && wraps >= 4,
        format!(
            "ramp error after 2 s {ramp_err:.2e} m/s; angular deviation {:.3}% of 0.5 rad/s across {wraps} wraps",
            100.0 * wrap_dev
        ),
    )
}

// ---------------------------------------------------------------------------

fn reward_codomains() -> Verdict {
    let cfg = RunConfig::default();
    let lim = cfg.task_limits();
    let rp = cfg.reward_params();
    let scale = 1.0 - rp.gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bounds = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    let mut counts = [0usize; 3];
    let slot = |r: RewardRegion| match r {
        RewardRegion::Upright => 0,
        RewardRegion::Swing => 1,
        RewardRegion::InputViolation => 2,
    };
    let mut record = |v: f64, th: f64, w: f64, x: f64| {
        let (r, reg) = reward(v, th, w, x, &lim, &rp);
        let s = slot(reg);
        counts[s] += 1;
        bounds[s].0 = bounds[s].0.min(r);
        bounds[s].1 = bounds[s].1.max(r);
    };
    for _ in 0..1_000_000 {
        record(
            rng.gen_range(-2.0..=2.0) * lim.v_max,
            rng.gen_range(-PI..=PI),
            rng.gen_range(-1.0..=1.0) * rp.omega_safe_plus,
            rng.gen_range(-1.0..=1.0) * lim.x_max,
        );
    }
    // extremes of every region
    for v in [0.0, lim.v_max, -lim.v_max, 2.0 * lim.v_max] {
        for th in [0.0, lim.theta_thresh, -lim.theta_thresh, lim.theta_thresh + 1e-12, PI, -PI] {
            for w in [0.0, rp.omega_safe_plus, -rp.omega_safe_plus] {
                for x in [0.0, lim.x_max, -lim.x_max] {
                    record(v, th, w, x);
                }
            }
        }
    }
    let [a, b, c] = bounds;
    let eps = 1e-15;
    let ok = a.0 >= -scale / 2.0 - eps
        && a.1 <= scale + eps
        && b.0 >= -scale - eps
        && b.1 <= -scale / 2.0 + eps
        && c.1 <= -scale + eps
        && c.1 <= b.0 + eps
        && b.1 <= a.0 + eps;
    verdict(
        ok,
        format!(
            "A [{:.5}, {:.5}] n={}, B [{:.5}, {:.5}] n={}, C [{:.5}, {:.5}] n={}",
            a.0, a.1, counts[0], b.0, b.1, counts[1], c.0, c.1, counts[2]
        ),
    )
}

// ---------------------------------------------------------------------------

const TRAIN_BUDGET_S: f64 = 45.0 * 60.0;

fn sweep_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_sweep")
}

fn length_report(runs: &[&RunSummary], threshold: f64) -> (usize, usize, f64, bool) {
    let swung = runs.iter().filter(|r| r.swung_up()).count();
    let stable = runs.iter().filter(|r| r.stabilized()).count();
    let finals: Vec<f64> = runs.iter().map(|r| r.final_mean_reward(5).unwrap_or(f64::NEG_INFINITY)).collect();
    let final_mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let ok = swung >= 4 && stable >= 3 && final_mean >= threshold && runs.iter().all(|r| r.error.is_none());
    (swung, stable, final_mean, ok)
}

fn swing_up_training() -> Verdict {
    let cfg = RunConfig::default();
    let threshold = 0.5 * (1.0 - cfg.ddpg.gamma);
    let lengths = [0.135, 0.29];
    let seeds = [1u64, 2, 3, 4, 5];
    let out = sweep_dir();
    let _ = std::fs::remove_dir_all(&out);
    let started = Instant::now();
    let cells: Vec<(u64, f64)> = lengths.iter().flat_map(|&l| seeds.iter().map(move |&s| (s, l))).collect();
    let mut runs = run_cells(&cfg, &cells, &out, default_jobs());
    for r in &runs {
        eprintln!(
            "  l={} seed={}: final-5 mean {:+.4}, swing-up {:?}, longest stabilized {:.1} s{}",
            r.l,
            r.seed,
            r.final_mean_reward(5).unwrap_or(f64::NAN),
            r.eval.and_then(|m| m.swing_up_time),
            r.eval.map_or(0.0, |m| m.longest_stabilized),
            r.error.as_ref().map_or(String::new(), |e| format!(" ({e})"))
        );
    }

    // one failing seed may be replaced by a fresh one
    let mut rerun_note = String::new();
    let failing_length = lengths.iter().copied().find(|&l| {
        let cell: Vec<&RunSummary> = runs.iter().filter(|r| r.l == l).collect();
        !length_report(&cell, threshold).3
    });
    if let Some(l) = failing_length {
        let worst = runs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.l == l)
            .min_by(|(_, a), (_, b)| {
                let key = |r: &RunSummary| (r.stabilized(), r.swung_up(), r.final_mean_reward(5).unwrap_or(f64::NEG_INFINITY));
                let (ka, kb) = (key(a), key(b));
                (ka.0, ka.1).cmp(&(kb.0, kb.1)).then(ka.2.total_cmp(&kb.2))
            })
            .map(|(i, _)| i)
            .expect("length has runs");
        let fresh = seeds.iter().max().unwrap() + 1;
        let replaced = runs[worst].seed;
        let r = run_cells(&cfg, &[(fresh, l)], &out, 1).remove(0);
        rerun_note = format!("; re-ran l={l} seed {replaced} as seed {fresh} (stabilized: {})", r.stabilized());
        runs[worst] = r;
    }
    let wall = started.elapsed().as_secs_f64();

    let mut ok = wall <= TRAIN_BUDGET_S;
    let mut parts = Vec::new();
    for l in lengths {
        let cell: Vec<&RunSummary> = runs.iter().filter(|r| r.l == l).collect();
        let (swung, stable, final_mean, pass) = length_report(&cell, threshold);
        ok &= pass;
        parts.push(format!(
            "l={l}: swing-up {swung}/{n}, stabilized 60 s {stable}/{n}, final-5 mean reward {final_mean:.4} (need {threshold})",
            n = cell.len()
        ));
    }
    verdict(
        ok,
        format!(
            "{}; wall clock {:.1} min with {} worker(s) (budget 45){rerun_note}",
            parts.join("; "),
            wall / 60.0,
            default_jobs()
        ),
    )
}

// ---------------------------------------------------------------------------

fn safeguard_safety() -> Verdict {
    let cfg = SafeguardConfig::default();
    let limits = PlantLimits::default();
    let pll = PllConfig::new(7.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let steps = 1_000_000usize;
    let episode = 5_000;
    let (mut braking_intervals, mut braking_ticks, mut centering_ticks) = (0usize, 0usize, 0usize);
    let mut violations = Vec::new();
    let mut max_abs_x = 0.0f64;
    let mut k = 0;
    while k < steps {
        // random restart: position, angle and a possibly fast-spinning rod
        let params = PlantParams {
            l: if (k / episode) % 2 == 0 { 0.135 } else { 0.29 },
            ..PlantParams::default()
        };
        let mut s = PlantState {
            x: rng.gen_range(-0.15..0.15),
            theta: rng.gen_range(-PI..PI),
            omega: rng.gen_range(-25.0..25.0),
            ..PlantState::hanging()
        };
        let mut est_x = VelocityEstimator::new(PllKind::Linear, pll);
        let mut est_th = VelocityEstimator::new(PllKind::Angular, pll);
        let mut sg = SafeguardState::default();
        let (mut a, mut hold) = (0.0, 0);
        let mut braking = false;
        for _ in 0..episode.min(steps - k) {
            let _ = est_x.update(s.x, cfg.ts);
            let w_hat = est_th.update(s.theta, cfg.ts);
            if hold == 0 {
                a = rng.gen_range(-2.0..=2.0);
                hold = rng.gen_range(1..10);
            }
            hold -= 1;
            let out = sg.apply(&cfg, s.x, w_hat, a * cfg.v_max);
            match out.mode {
                SafeguardMode::Braking => {
                    if !braking {
                        braking_intervals += 1;
                    }
                    braking = true;
                    braking_ticks += 1;
                    if out.v_cmd != 0.0 {
                        violations.push(format!("v = {} while braking", out.v_cmd));
                    }
                }
                mode => {
                    if braking && w_hat.abs() > cfg.omega_safe_minus {
                        violations.push(format!("braking left for {mode:?} at ω̂ = {w_hat}"));
                    }
                    braking = false;
                    if mode == SafeguardMode::Centering {
                        centering_ticks += 1;
                    }
                }
            }
            match step_reduced(&params, &limits, &s, out.v_cmd, cfg.ts) {
                Ok(next) => s = next,
                Err(e) => {
                    violations.push(format!("fault: {e}"));
                    break;
                }
            }
            max_abs_x = max_abs_x.max(s.x.abs());
            k += 1;
        }
        if violations.len() > 5 {
            break;
        }
    }
    verdict(
        violations.is_empty() && k == steps && braking_intervals > 0,
        format!(
            "{k} steps, max |x| {max_abs_x:.4} m, {braking_intervals} braking intervals ({braking_ticks} ticks), \
             {centering_ticks} centering ticks, violations {:?}",
            &violations[..violations.len().min(3)]
        ),
    )
}

// ---------------------------------------------------------------------------

fn random_experience(rng: &mut ChaCha8Rng) -> Experience {
    let mut v = [0.0f64; 2 * OBS_DIM + 2];
    for x in v.iter_mut() {
        *x = loop {
            let f = f32::from_bits(rng.gen());
            if f.is_finite() {
                break f as f64;
            }
        };
    }
    Experience::from_array(&v)
}

fn link_timing() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut bus = BusModel::new(BIT_RATE);
    bus.enqueue(CanFrame::new(0x100, &[0; 8]).unwrap(), 0.0);
    let single = bus.step(1.0)[0].time;
    ok &= (single - 111e-6).abs() < 1e-12;
    notes.push(format!("dlc-8 frame {:.3} µs", single * 1e6));

    let actor = MlpParams::init(actor_layers(&[128, 128], 0.3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let sync = |actor: &MlpParams| {
        let mut bus = BusModel::new(BIT_RATE);
        let msgs = chunk_weights(actor, 1).unwrap();
        let mut n = 0;
        for m in &msgs {
            for f in m.to_frames().unwrap() {
                bus.enqueue(f, 0.0);
                n += 1;
            }
        }
        (n, bus.step(10.0).last().unwrap().time)
    };
    let (frames, t_sync) = sync(&actor);
    let (_, t_again) = sync(&actor);
    ok &= frames == 11_863 && (t_sync - 1.316793).abs() < 1e-9 && t_sync == t_again;
    notes.push(format!("actor sync {frames} frames in {t_sync:.6} s"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bus = BusModel::new(BIT_RATE);
    let seconds = 100.0;
    let ts = 0.02;
    let mut delivered = 0;
    for k in 0..(seconds / ts) as usize {
        let t = k as f64 * ts;
        delivered += bus.step(t).len();
        for f in encode_experience(&random_experience(&mut rng), k as u32) {
            bus.enqueue(f, t);
        }
    }
    delivered += bus.step(seconds).len();
    let occupancy = bus.busy_bits() as f64 / (seconds * BIT_RATE);
    ok &= occupancy < 0.06 && delivered == (seconds / ts) as usize * EXPERIENCE_FRAMES;
    notes.push(format!("50 Hz experience stream occupancy {:.2}%", 100.0 * occupancy));

    let mut mismatches = 0;
    for i in 0..100_000u32 {
        let e = random_experience(&mut rng);
        let seq = rng.gen::<u32>() & 0xFF_FFFF;
        let frames = encode_experience(&e, seq);
        match decode_experience(&frames) {
            Ok(d) if d.seq == seq && d.experience.to_array().map(f64::to_bits) == e.to_array().map(f64::to_bits) => {}
            _ => mismatches += 1,
        }
        let single = match i % 3 {
            0 => Message::WeightCommit {
                version: rng.gen(),
                param_count: rng.gen(),
                checksum: rng.gen(),
            },
            1 => Message::Telemetry {
                step: rng.gen(),
                reward: f32::from_bits(rng.gen::<u32>() & 0x7F7F_FFFF),
            },
            _ => Message::WeightChunk {
                tag: rng.gen_range(0..4),
                index: rng.gen_range(0..1 << 14),
                data: (0..rng.gen_range(0..=6)).map(|_| rng.gen()).collect(),
            },
        };
        let frame = single.to_frames().unwrap()[0];
        if Message::from_frame(&frame).ok() != Some(single) {
            mismatches += 1;
        }
    }
    ok &= mismatches == 0;
    notes.push(format!("2×10⁵ message round trips, {mismatches} mismatches"));
    verdict(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------

fn determinism() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.ddpg.train_duration = 60.0;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        cmd_train(&cfg, 11, d.path(), false).expect("training run");
    }
    let same = |name: &str| std::fs::read(dirs[0].path().join(name)).unwrap() == std::fs::read(dirs[1].path().join(name)).unwrap();
    let (trace, weights, conv) = (same(TRACE_FILE), same(WEIGHTS_FILE), same(CONVERGENCE_FILE));
    let size = std::fs::metadata(dirs[0].path().join(TRACE_FILE)).unwrap().len();
    verdict(
        trace && weights && conv,
        format!("two 60 s runs, seed 11: trace identical {trace} ({size} bytes), weights identical {weights}, convergence identical {conv}"),
    )
}

// ---------------------------------------------------------------------------

/// Two states, two actions. Action +1 moves to the other state, −1 stays;
/// the reward is `s + a/4`. The bootstrap policy always picks +1, so with
/// γ = 1/2 the action values are q(0,+1) = 7/6, q(1,+1) = 11/6,
/// q(0,−1) = 1/3 and q(1,−1) = 5/3.
fn critic_oracle() -> Verdict {
    let gamma = 0.5;
    let encode = |s: usize| {
        let mut o = [0.0; OBS_DIM];
        o[s] = 1.0;
        o
    };
    let v = [7.0 / 6.0, 11.0 / 6.0];
    let q = |s: usize, a: f64| if a > 0.0 { v[s] } else { s as f64 - 0.25 + gamma * v[s] };
    let mut batch = Vec::new();
    for s in 0..2 {
        for a in [-1.0, 1.0] {
            let next = if a > 0.0 { 1 - s } else { s };
            batch.push(Experience {
                o: encode(s),
                a,
                r: s as f64 + 0.25 * a,
                o_next: encode(next),
            });
        }
    }
    // constant policy a = +1
    let policy_shapes = actor_layers(&[], 0.3);
    let mut policy = vec![0.0; OBS_DIM + 1];
    policy[OBS_DIM] = 1.0;
    let actor = MlpParams::from_values(policy_shapes, policy).unwrap();
    let critic = MlpParams::init(critic_layers(&[16, 16], 0.3), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let mut nets = AgentNets::from_live(actor, critic);
    let mut opt = Optimizer::new(OptimizerKind::Plain, nets.critic.param_count());
    let max_err = |nets: &AgentNets| {
        batch
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut row = e.o.to_vec();
                row.push(e.a);
                (nets.critic.forward(&row).unwrap()[0] - q(i / 2, e.a)).abs()
            })
            .fold(0.0, f64::max)
    };
    let mut reached = None;
    for k in 1..=10_000 {
        critic_update(&mut nets, &mut opt, &batch, gamma, 0.02);
        soft_update(&mut nets, 0.15);
        if reached.is_none() && max_err(&nets) < 0.05 {
            reached = Some(k);
        }
    }
    let last = max_err(&nets);
    verdict(
        reached.is_some() && last < 0.05,
        format!("max |q̂ − q| < 0.05 first after {reached:?} updates; {last:.2e} after 10⁴"),
    )
}
