//! Forward noising, ancestral sampling recorded as a trajectory, and the
//! per-pixel Gaussian log-densities of the recorded reverse transitions.

mod dump;
mod schedule;

pub use dump::TrajectoryDump;
pub use schedule::{Schedule, DEFAULT_SIGMA_MIN};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::net::{forward_on_tape, predict_noise, Condition, DenoiserParams};

/// `sqrt(abar_s) * x0 + sqrt(1 - abar_s) * noise`.
pub fn forward_noise(x0: &Grid, s: usize, noise: &Grid, sched: &Schedule) -> Result<Grid> {
    sched.check_step(s)?;
    if !x0.same_shape(noise) {
        return Err(Error::Dimension("image and noise shapes differ".into()));
    }
    let ab = sched.alpha_bars[s];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .as_slice()
        .iter()
        .zip(noise.as_slice())
        .map(|(x, n)| a * x + b * n)
        .collect();
    Grid::from_vec(x0.channels(), x0.height(), x0.width(), data)
}

pub fn standard_normal_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid {
    let data = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    Grid::from_vec(c, h, w, data).expect("normal samples are finite")
}

/// One recorded denoising chain `x_T -> ... -> x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[x_T, x_{T-1}, ..., x_0]`.
    pub states: Vec<Grid>,
    /// Posterior means, one per transition, in sampling order.
    pub means: Vec<Grid>,
    /// Standard deviations, one per transition, in sampling order.
    pub step_sigmas: Vec<f64>,
    pub condition: Condition,
    pub rng_seed: u64,
    pub schedule: Schedule,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.means.len()
    }

    pub fn final_state(&self) -> &Grid {
        self.states.last().expect("trajectory has states")
    }

    fn index(&self, s: usize) -> Result<usize> {
        self.schedule.check_step(s)?;
        Ok(self.steps() - 1 - s)
    }

    /// `(x_{s+1}, x_s)` for step `s`.
    pub fn transition(&self, s: usize) -> Result<(&Grid, &Grid)> {
        let k = self.index(s)?;
        Ok((&self.states[k], &self.states[k + 1]))
    }

    pub fn mean(&self, s: usize) -> Result<&Grid> {
        Ok(&self.means[self.index(s)?])
    }

    pub fn sigma(&self, s: usize) -> Result<f64> {
        Ok(self.step_sigmas[self.index(s)?])
    }
}

/// Posterior mean of step `s` given the predicted noise.
pub fn posterior_mean(x: &Grid, eps: &Grid, s: usize, sched: &Schedule) -> Result<Grid> {
    let (a, b) = sched.mean_coefficients(s);
    let data = x
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Grid::from_vec(x.channels(), x.height(), x.width(), data)
}

/// Ancestral sampling from `N(0, 1)` noise. A pure function of
/// `(params, c, sched, seed)`.
pub fn sample_trajectory(
    params: &DenoiserParams,
    c: Condition,
    sched: &Schedule,
    seed: u64,
) -> Result<Trajectory> {
    let spec = &params.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal_grid(&mut rng, spec.image_channels, spec.height, spec.width);
    let steps = sched.len();
    let mut states = Vec::with_capacity(steps + 1);
    let mut means = Vec::with_capacity(steps);
    let mut step_sigmas = Vec::with_capacity(steps);
    states.push(x.clone());
    for s in (0..steps).rev() {
        let nonfinite = |_| Error::Sampling { step: s };
        let eps = predict_noise(params, &x, sched.model_steps[s], c, None).map_err(|e| match e {
            Error::Numeric(_) => Error::Sampling { step: s },
            other => other,
        })?;
        let mean = posterior_mean(&x, &eps, s, sched).map_err(nonfinite)?;
        let sigma = sched.sigmas[s];
        let z = standard_normal_grid(&mut rng, spec.image_channels, spec.height, spec.width);
        let data = mean
            .as_slice()
            .iter()
            .zip(z.as_slice())
            .map(|(m, z)| m + sigma * z)
            .collect();
        x = Grid::from_vec(spec.image_channels, spec.height, spec.width, data).map_err(nonfinite)?;
        means.push(mean);
        step_sigmas.push(sigma);
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        means,
        step_sigmas,
        condition: c,
        rng_seed: seed,
        schedule: sched.clone(),
    })
}

/// Records the recomputed transition density of step `s` on `tape` and
/// returns the per-pixel log-probability map (channels summed, `H x W`).
pub fn logprob_on_tape(
    params: &DenoiserParams,
    traj: &Trajectory,
    s: usize,
    tape: &mut Tape,
) -> Result<Var> {
    let (x_before, x_after) = traj.transition(s)?;
    let sigma = traj.sigma(s)?;
    if !(sigma > 0.0) {
        return Err(Error::Numeric(format!("non-positive sigma {sigma} at step {s}")));
    }
    let sched = &traj.schedule;
    let eps = forward_on_tape(params, x_before, sched.model_steps[s], traj.condition, tape)?;
    let (a, b) = sched.mean_coefficients(s);
    let shift: Vec<f64> = x_before.as_slice().iter().map(|v| a * v).collect();
    let mean = tape.affine(eps, b, &shift);
    let lp = tape.gaussian_logprob(mean, x_after.as_slice(), sigma);
    Ok(tape.channel_sum(lp, x_after.channels()))
}

/// Per-pixel log-density `log p(x_s^{ij} | x_{s+1}, c)` of a recorded step,
/// recomputed under `params`.
pub fn per_pixel_logprob(
    params: &DenoiserParams,
    traj: &Trajectory,
    s: usize,
    tape: Option<&mut Tape>,
) -> Result<Grid> {
    let mut scratch = Tape::new();
    let tape = tape.unwrap_or(&mut scratch);
    let v = logprob_on_tape(params, traj, s, tape)?;
    let x = traj.final_state();
    Grid::from_vec(1, x.height(), x.width(), tape.value(v).to_vec())
}

/// Log-density of the whole step; the sum of [`per_pixel_logprob`].
pub fn total_logprob(params: &DenoiserParams, traj: &Trajectory, s: usize) -> Result<f64> {
    Ok(per_pixel_logprob(params, traj, s, None)?.sum())
}
