//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! The pretrained model used by the experiment analogs is cached under the
//! cargo target directory, keyed by the model, schedule and pretraining
//! settings.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use pxpo_core::autodiff::Tape;
use pxpo_core::datasets::{generate_scene, to_model_space, SceneClassifier, FOREST};
use pxpo_core::diffusion::{
    forward_noise, per_pixel_logprob, sample_trajectory, standard_normal_grid, Trajectory,
};
use pxpo_core::grid::Grid;
use pxpo_core::harness::{
    build_provider, derive_seed, run_pretraining, sample_images, train_in_memory, water_area,
    TrainConfig, Trainer,
};
use pxpo_core::net::{forward_on_tape, Condition, DenoiserParams};
use pxpo_core::policy::{
    crosstalk_report, ddpo_surrogate_loss, pixel_weighted_logprob, pxpo_surrogate_loss, RewardMap,
    RolloutBatch,
};
use pxpo_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn half_log_2pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Whole-state diagonal Gaussian log-density, written out independently of
/// the per-pixel path.
fn joint_gaussian_logpdf(mean: &Grid, x: &Grid, sigma: f64) -> f64 {
    let quad: f64 = mean
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(m, v)| ((v - m) / sigma).powi(2))
        .sum();
    let d = x.len() as f64;
    -0.5 * quad - d * (sigma.ln() + half_log_2pi())
}

fn factorization() -> Result<Verdict> {
    let cfg = TrainConfig::default();
    let params = DenoiserParams::init(cfg.net_spec(), 7)?;
    let sched = cfg.schedule()?;
    let mut worst_split = 0.0f64;
    let mut worst_joint = 0.0f64;
    let mut count = 0;
    for i in 0..100u64 {
        let c = Condition::new((i % 3) as usize, cfg.num_classes)?;
        let traj = sample_trajectory(&params, c, &sched, derive_seed(1, 0, i))?;
        for s in 0..traj.steps() {
            let map = per_pixel_logprob(&params, &traj, s, None)?;
            let per_pixel: f64 = map.as_slice().iter().sum();
            let (_, x_after) = traj.transition(s)?;
            let joint = joint_gaussian_logpdf(traj.mean(s)?, x_after, traj.sigma(s)?);
            // Channel-by-channel accumulation, a different summation order.
            let by_channel: f64 = (0..x_after.channels())
                .map(|ch| {
                    let mean = traj.mean(s).unwrap().channel(ch).unwrap();
                    joint_gaussian_logpdf(&mean, &x_after.channel(ch).unwrap(), traj.sigma(s).unwrap())
                })
                .sum();
            worst_joint = worst_joint.max((joint - per_pixel).abs());
            worst_split = worst_split.max((by_channel - per_pixel).abs());
            count += 1;
        }
    }
    let worst = worst_joint.max(worst_split);
    verdict(
        worst < 1e-9,
        format!("{count} steps over 100 trajectories, max |joint - sum per-pixel| = {worst:.2e} (tol 1e-9)"),
    )
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Backward pass against central differences on the noise-prediction loss
/// of the default network.
fn gradient_check() -> Result<Verdict> {
    let cfg = TrainConfig::default();
    let mut params = DenoiserParams::init(cfg.net_spec(), 3)?;
    let sched = cfg.training_schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x0 = to_model_space(&generate_scene(FOREST, 5, cfg.image_height, cfg.image_width)?.image)?;
    let eps = standard_normal_grid(&mut rng, 3, cfg.image_height, cfg.image_width);
    let step = 20;
    let xt = forward_noise(&x0, step, &eps, &sched)?;
    let c = Condition::new(FOREST, cfg.num_classes)?;

    let loss = |p: &DenoiserParams, grads: Option<&mut Vec<f64>>| -> Result<f64> {
        let mut tape = Tape::new();
        let pred = forward_on_tape(p, &xt, step, c, &mut tape)?;
        let l = tape.mse(pred, eps.as_slice());
        if let Some(g) = grads {
            tape.backward(l, &[1.0], g)?;
        }
        Ok(tape.value(l)[0])
    };
    let mut grads = vec![0.0; params.num_params()];
    loss(&params, Some(&mut grads))?;

    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(0..params.num_params());
        let orig = params.values[k];
        params.values[k] = orig + h;
        let up = loss(&params, None)?;
        params.values[k] = orig - h;
        let down = loss(&params, None)?;
        params.values[k] = orig;
        worst = worst.max(relative_error(grads[k], (up - down) / (2.0 * h)));
    }
    verdict(
        worst < 1e-4,
        format!("100 coordinates of {}, h=1e-5, max relative error {worst:.2e} (tol 1e-4)", params.num_params()),
    )
}

/// Same check through the full pixel-wise surrogate on a small network.
fn surrogate_gradient_check() -> Result<Verdict> {
    let mut cfg = TrainConfig::default();
    cfg.image_height = 8;
    cfg.image_width = 8;
    cfg.base_channels = 4;
    cfg.time_dim = 4;
    cfg.train_steps = 10;
    cfg.rollout_steps = 3;
    let mut params = DenoiserParams::init(cfg.net_spec(), 4)?;
    let sched = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut trajectories = Vec::new();
    let mut rewards = Vec::new();
    for i in 0..2 {
        let c = Condition::new(i, cfg.num_classes)?;
        trajectories.push(sample_trajectory(&params, c, &sched, 40 + i as u64)?);
        let r: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        rewards.push(RewardMap::model(Grid::from_vec(1, 8, 8, r)?)?);
    }
    let batch = RolloutBatch::new(trajectories, rewards)?;
    let value = |p: &DenoiserParams| -> Result<f64> {
        let mut total = 0.0;
        for (traj, r) in batch.trajectories.iter().zip(&batch.rewards) {
            for s in 0..traj.steps() {
                let lp = per_pixel_logprob(p, traj, s, None)?;
                total += lp.as_slice().iter().zip(r.values.as_slice()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(-total / batch.len() as f64)
    };
    params.zero_grad();
    let reported = pxpo_surrogate_loss(&mut params, &batch)?;
    let grads = params.grads.clone();
    let direct = value(&params)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(0..params.num_params());
        let orig = params.values[k];
        params.values[k] = orig + h;
        let up = value(&params)?;
        params.values[k] = orig - h;
        let down = value(&params)?;
        params.values[k] = orig;
        worst = worst.max(relative_error(grads[k], (up - down) / (2.0 * h)));
    }
    let value_gap = (reported - direct).abs();
    verdict(
        worst < 1e-4 && value_gap < 1e-9,
        format!("pixel-wise surrogate: max relative error {worst:.2e}, loss value gap {value_gap:.1e}"),
    )
}

/// One-step, two-pixel policy `x ~ N(W z + b, sigma^2 I)` with pixel rewards
/// `r_0 = -(x_0 - 1)^2` and `r_1 = sin(x_1)`, each depending on its own pixel.
fn unbiasedness() -> Result<Verdict> {
    let z: [f64; 2] = [1.0, -0.5];
    let theta: [f64; 6] = [0.3, -0.2, 0.1, 0.4, 0.2, -0.1];
    let sigma: f64 = 0.5;
    let mu = [
        theta[0] * z[0] + theta[1] * z[1] + theta[4],
        theta[2] * z[0] + theta[3] * z[1] + theta[5],
    ];
    // d/dmu of E[r]: E[-(x-1)^2] = -((mu-1)^2 + sigma^2), E[sin x] = sin(mu) e^{-sigma^2/2}.
    let dmu = [-2.0 * (mu[0] - 1.0), mu[1].cos() * (-0.5 * sigma * sigma).exp()];
    let exact = [dmu[0] * z[0], dmu[0] * z[1], dmu[1] * z[0], dmu[1] * z[1], dmu[0], dmu[1]];

    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sum = [0.0; 6];
    let mut sum_sq = [0.0; 6];
    for _ in 0..n {
        let noise = standard_normal_grid(&mut rng, 1, 1, 2);
        let x = [mu[0] + sigma * noise.as_slice()[0], mu[1] + sigma * noise.as_slice()[1]];
        let r = [-(x[0] - 1.0).powi(2), x[1].sin()];
        let mut tape = Tape::new();
        let w = tape.param(&theta, 0, 4);
        let b = tape.param(&theta, 4, 2);
        let zc = tape.constant(z.to_vec());
        let mean = tape.linear(zc, w, b);
        let lp = tape.gaussian_logprob(mean, &x, sigma);
        let term = pixel_weighted_logprob(&mut tape, lp, &r)?;
        let mut g = vec![0.0; 6];
        tape.backward(term, &[1.0], &mut g)?;
        for k in 0..6 {
            sum[k] += g[k];
            sum_sq[k] += g[k] * g[k];
        }
    }
    let nf = n as f64;
    let mut worst = 0.0f64;
    for k in 0..6 {
        let mean = sum[k] / nf;
        let var = (sum_sq[k] / nf - mean * mean) * nf / (nf - 1.0);
        let se = (var / nf).sqrt();
        worst = worst.max((mean - exact[k]).abs() / se);
    }
    verdict(
        worst < 3.0,
        format!("{n} rollouts, 6 parameters, max |estimate - exact| = {worst:.2} standard errors (tol 3)"),
    )
}

fn crosstalk() -> Result<Verdict> {
    let mut cfg = TrainConfig::default();
    cfg.image_height = 8;
    cfg.image_width = 8;
    cfg.base_channels = 4;
    cfg.time_dim = 4;
    cfg.train_steps = 10;
    cfg.rollout_steps = 4;
    let mut params = DenoiserParams::init(cfg.net_spec(), 21)?;
    let sched = cfg.schedule()?;
    let c = Condition::new(0, cfg.num_classes)?;
    let traj = sample_trajectory(&params, c, &sched, 3)?;

    // Zero on the left half (the set A), positive on the right.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let half: Vec<f64> = (0..64)
        .map(|i| if i % 8 < 4 { 0.0 } else { rng.gen_range(0.5..1.5) })
        .collect();
    let report = crosstalk_report(&params, &traj, &RewardMap::model(Grid::from_vec(1, 8, 8, half)?)?)?;
    let exact_zero = report.pxpo_norms.iter().all(|&v| v == 0.0);
    let ddpo_leak = report.ddpo_cross_total();

    // Uniform maps against the scalar loss with the same per-image reward.
    let rho = 0.7;
    let trajs: Vec<Trajectory> = (0..3)
        .map(|i| sample_trajectory(&params, c, &sched, 100 + i))
        .collect::<Result<_>>()?;
    let uniform = RewardMap::model(Grid::filled(1, 8, 8, rho)?)?;
    let batch = RolloutBatch::new(trajs.clone(), vec![uniform.clone(); 3])?;
    params.zero_grad();
    pxpo_surrogate_loss(&mut params, &batch)?;
    let pxpo = params.grads.clone();
    let scalar = RolloutBatch::with_scalars(trajs, vec![uniform; 3], vec![rho; 3])?;
    params.zero_grad();
    ddpo_surrogate_loss(&mut params, &scalar)?;
    let uniform_gap = pxpo
        .iter()
        .zip(&params.grads)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let pass = exact_zero && ddpo_leak > 0.0 && uniform_gap <= 1e-9 && report.cosine_similarity < 0.999;
    verdict(
        pass,
        format!(
            "|A| = {}: pixel-wise weight on A {} (scalar leak {ddpo_leak:.3e}); uniform max gap {uniform_gap:.1e} (tol 1e-9); half-mask cosine {:.5} (< 0.999)",
            report.pixels.len(),
            if exact_zero { "exactly 0" } else { "NONZERO" },
            report.cosine_similarity
        ),
    )
}

fn cache_key(cfg: &TrainConfig) -> u64 {
    let mut h = DefaultHasher::new();
    for (section, key, value) in cfg.entries() {
        if matches!(section, "model" | "schedule" | "pretrain") {
            (key, value).hash(&mut h);
        }
    }
    h.finish()
}

fn pretrained() -> Result<(DenoiserParams, String)> {
    let cfg = TrainConfig::default();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join(format!("pxpo-pretrained-{:016x}.ckpt", cache_key(&cfg)));
    if let Ok(p) = DenoiserParams::load_checkpoint(&path) {
        return Ok((p, format!("loaded {}", path.display())));
    }
    let (params, report) = run_pretraining(&cfg)?;
    std::fs::create_dir_all(&dir)?;
    params.save_checkpoint(&path)?;
    Ok((
        params,
        format!(
            "{} steps, final windowed loss {:.4} (threshold {}), cached at {}",
            cfg.pretrain_steps,
            report.final_loss,
            cfg.pretrain_loss_threshold,
            path.display()
        ),
    ))
}

fn experiment_channel_penalty(base: &DenoiserParams) -> Result<Verdict> {
    let cfg = TrainConfig::preset("channel_penalty")?;
    let mut provider = build_provider(&cfg)?;
    let report = train_in_memory(&cfg, base.clone(), provider.as_mut())?;
    let n = report.records.len();
    let first = report.window_mean(0..3);
    let last = report.window_mean(n - 3..n);
    let improvement = (last - first) / first.abs();

    let clf = SceneClassifier::calibrate(cfg.image_height, cfg.image_width, 100, 777)?;
    let seeds: Vec<u64> = (0..64).map(|i| derive_seed(cfg.seed, u64::MAX, i)).collect();
    let (_, images) = sample_images(
        &report.params,
        &cfg.schedule()?,
        Condition::new(cfg.class_id, cfg.num_classes)?,
        &seeds,
        (cfg.image_height, cfg.image_width),
    )?;
    let mut hits = 0;
    for img in &images {
        hits += usize::from(clf.classify(img)? == cfg.class_id);
    }
    let accuracy = hits as f64 / images.len() as f64;
    verdict(
        improvement >= 0.15 && accuracy >= 0.7,
        format!(
            "mean reward {first:.4} -> {last:.4} ({:+.1}%, need >= +15%); class kept on {hits}/{} samples (need >= 70%)",
            100.0 * improvement,
            images.len()
        ),
    )
}

fn experiment_segmenter(base: &DenoiserParams) -> Result<Verdict> {
    let cfg = TrainConfig::preset("segmenter")?;
    let mut provider = build_provider(&cfg)?;
    let report = train_in_memory(&cfg, base.clone(), provider.as_mut())?;
    let n = report.records.len();
    let first = report.window_mean(0..3);
    let last = report.window_mean(n - 3..n);
    verdict(
        last > first,
        format!("mean reward {first:.5} -> {last:.5} over {n} epochs (need strict improvement)"),
    )
}

/// Runs the fixed-noise painter loop and returns (first reward, last
/// reward, water area before, water area after).
fn painter_run(base: &DenoiserParams, inverse: bool) -> Result<(f64, f64, f64, f64)> {
    let mut cfg = TrainConfig::preset("painter")?;
    if inverse {
        cfg.set("feedback", "painter_inverse")?;
    }
    let mut provider = build_provider(&cfg)?;
    let mut trainer = Trainer::new(cfg, base.clone())?;
    let before = water_area(&trainer.sample()?.images[0]);
    while trainer.epoch() < trainer.cfg.epochs {
        trainer.run_epoch(provider.as_mut())?;
    }
    let after = water_area(&trainer.sample()?.images[0]);
    let recs = &trainer.records;
    Ok((recs[0].mean_reward, recs[recs.len() - 1].mean_reward, before, after))
}

fn experiment_painter(base: &DenoiserParams) -> Result<Verdict> {
    let (r0, r1, w0, w1) = painter_run(base, false)?;
    let (_, _, v0, v1) = painter_run(base, true)?;
    let (dp, di) = (w1 - w0, v1 - v0);
    verdict(
        r1 > r0 && dp < 0.0 && di > 0.0,
        format!(
            "painted reward epoch 1 {r0:.4} -> epoch 15 {r1:.4}; disk area {w0:.4} -> {w1:.4} ({dp:+.4}) vs opposite painter {v0:.4} -> {v1:.4} ({di:+.4})"
        ),
    )
}

struct Gate {
    filters: Vec<String>,
    results: Vec<bool>,
}

impl Gate {
    /// Like libtest, non-flag arguments select criteria by substring.
    fn selects(&self, label: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| label.contains(f.as_str()))
    }

    fn run(&mut self, label: &str, f: impl FnOnce() -> Result<Verdict>) {
        if !self.selects(label) {
            return;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "[{}] {label}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        self.results.push(pass);
    }
}

const EXPERIMENTS: [&str; 3] = [
    "experiment 1: channel penalty",
    "experiment 2: sparse segmenter",
    "experiment 3: scripted painter",
];

fn main() -> ExitCode {
    let mut gate = Gate {
        filters: std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect(),
        results: Vec::new(),
    };
    gate.run("factorization identity", factorization);
    gate.run("gradient correctness (denoiser)", gradient_check);
    gate.run("gradient correctness (pixel-wise surrogate)", surrogate_gradient_check);
    gate.run("score-function unbiasedness", unbiasedness);
    gate.run("cross-talk elimination", crosstalk);

    if EXPERIMENTS.iter().any(|l| gate.selects(l)) {
        let start = Instant::now();
        match pretrained() {
            Ok((base, note)) => {
                println!("[INFO] pretrained model: {note} ({:.1}s)", start.elapsed().as_secs_f64());
                gate.run(EXPERIMENTS[0], || experiment_channel_penalty(&base));
                gate.run(EXPERIMENTS[1], || experiment_segmenter(&base));
                gate.run(EXPERIMENTS[2], || experiment_painter(&base));
            }
            Err(e) => {
                println!("[FAIL] pretraining: {e}");
                gate.results.push(false);
            }
        }
    }

    let passed = gate.results.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance checks passed", gate.results.len());
    if passed == gate.results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
