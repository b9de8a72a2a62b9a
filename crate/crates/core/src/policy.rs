//! Score-function surrogate losses.
//!
//! Both losses are `-(1/N) * sum_traj sum_t <weights, log p_t>` where `log p_t`
//! is the per-pixel transition log-density map. For the pixel-wise loss the
//! weights are the trajectory's own reward map, so each pixel's log-likelihood
//! is scaled only by its own reward. For the scalar loss every pixel carries
//! the same weight, the image's scalar reward. Rewards are plain numbers on
//! the tape: no gradient flows through them.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{logprob_on_tape, Trajectory};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::net::DenoiserParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Pixel,
    Model,
}

/// Single-channel per-pixel feedback.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardMap {
    pub values: Grid,
    pub resolution: Resolution,
}

impl RewardMap {
    pub fn new(values: Grid, resolution: Resolution) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::Dimension(format!(
                "reward maps have one channel, got {}",
                values.channels()
            )));
        }
        Ok(Self { values, resolution })
    }

    pub fn pixel(values: Grid) -> Result<Self> {
        Self::new(values, Resolution::Pixel)
    }

    pub fn model(values: Grid) -> Result<Self> {
        Self::new(values, Resolution::Model)
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    /// Image-level reward as the sum of the pixel rewards.
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }
}

/// A Monte-Carlo batch of on-policy rollouts with their feedback.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// Per-pixel rewards at model resolution.
    pub rewards: Vec<RewardMap>,
    /// Image-level rewards for the scalar loss.
    pub scalar_rewards: Vec<f64>,
}

impl RolloutBatch {
    /// Builds a batch whose scalar rewards are the sums of the reward maps.
    pub fn new(trajectories: Vec<Trajectory>, rewards: Vec<RewardMap>) -> Result<Self> {
        let scalar_rewards = rewards.iter().map(RewardMap::total).collect();
        Self::with_scalars(trajectories, rewards, scalar_rewards)
    }

    pub fn with_scalars(
        trajectories: Vec<Trajectory>,
        rewards: Vec<RewardMap>,
        scalar_rewards: Vec<f64>,
    ) -> Result<Self> {
        if trajectories.len() != rewards.len() || rewards.len() != scalar_rewards.len() {
            return Err(Error::Dimension("rollout batch lists differ in length".into()));
        }
        if trajectories.is_empty() {
            return Err(Error::Dimension("rollout batch is empty".into()));
        }
        Ok(Self {
            trajectories,
            rewards,
            scalar_rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Joint standardisation over every pixel of every map. A (near-)constant
/// batch maps to all zeros.
pub fn standardize_rewards(batch: &[RewardMap]) -> Result<Vec<RewardMap>> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Dimension("cannot standardize an empty batch".into()))?;
    if batch.iter().any(|m| !m.values.same_shape(&first.values)) {
        return Err(Error::Dimension("reward maps differ in shape".into()));
    }
    let n = (batch.len() * first.values.len()) as f64;
    let mean = batch.iter().map(|m| m.values.sum()).sum::<f64>() / n;
    let var = batch
        .iter()
        .flat_map(|m| m.values.as_slice())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    batch
        .iter()
        .map(|m| {
            let values = if std < 1e-8 {
                m.values.map(|_| 0.0)?
            } else {
                m.values.map(|v| (v - mean) / std)?
            };
            RewardMap::new(values, m.resolution)
        })
        .collect()
}

fn check_rewards(batch: &RolloutBatch) -> Result<()> {
    for (traj, r) in batch.trajectories.iter().zip(&batch.rewards) {
        let x = traj.final_state();
        if r.resolution != Resolution::Model || r.height() != x.height() || r.width() != x.width() {
            return Err(Error::Dimension(format!(
                "reward map {}x{} ({:?}) does not match model resolution {}x{}; resample first",
                r.height(),
                r.width(),
                r.resolution,
                x.height(),
                x.width()
            )));
        }
    }
    Ok(())
}

/// Weights a per-pixel log-density map on `tape` by a reward map:
/// `sum_ij r^ij log p^ij`. The rewards enter as constants.
pub fn pixel_weighted_logprob(tape: &mut Tape, logprob: Var, rewards: &[f64]) -> Result<Var> {
    let n = tape.value(logprob).len();
    if rewards.len() != n {
        return Err(Error::Dimension(format!(
            "{} rewards for a log-density map of {n} pixels",
            rewards.len()
        )));
    }
    Ok(tape.dot(logprob, rewards))
}

/// Adds the gradient of `coef * sum_t <weights, log p_t>` for one trajectory
/// into a fresh buffer and returns `(value, grads)`.
fn weighted_trajectory_term(
    params: &DenoiserParams,
    traj: &Trajectory,
    weights: &[f64],
    coef: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; params.num_params()];
    let mut value = 0.0;
    for s in 0..traj.steps() {
        let mut tape = Tape::new();
        let lp = logprob_on_tape(params, traj, s, &mut tape)?;
        let term = pixel_weighted_logprob(&mut tape, lp, weights)?;
        value += coef * tape.value(term)[0];
        if coef != 0.0 {
            tape.backward(term, &[coef], &mut grads)?;
        }
    }
    Ok((value, grads))
}

fn surrogate(
    params: &mut DenoiserParams,
    batch: &RolloutBatch,
    weights: Vec<Vec<f64>>,
) -> Result<f64> {
    let coef = -1.0 / batch.len() as f64;
    let frozen: &DenoiserParams = params;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .trajectories
        .par_iter()
        .zip(weights.par_iter())
        .map(|(traj, w)| weighted_trajectory_term(frozen, traj, w, coef))
        .collect::<Result<_>>()?;
    // Reduce in batch order so results do not depend on thread scheduling.
    let mut loss = 0.0;
    for (value, grads) in &parts {
        loss += value;
        params.add_grads(grads);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite surrogate loss".into()));
    }
    Ok(loss)
}

/// Pixel-wise surrogate: `-(1/N) sum_traj sum_ij r^ij sum_t log p_t^ij`.
/// Accumulates its gradient into `params.grads` and returns the loss value.
pub fn pxpo_surrogate_loss(params: &mut DenoiserParams, batch: &RolloutBatch) -> Result<f64> {
    check_rewards(batch)?;
    let weights = batch
        .rewards
        .iter()
        .map(|r| r.values.as_slice().to_vec())
        .collect();
    surrogate(params, batch, weights)
}

/// Scalar surrogate: `-(1/N) sum_traj R sum_t log p_t` with the image-level
/// reward `R` from `batch.scalar_rewards`.
pub fn ddpo_surrogate_loss(params: &mut DenoiserParams, batch: &RolloutBatch) -> Result<f64> {
    let weights = batch
        .trajectories
        .iter()
        .zip(&batch.scalar_rewards)
        .map(|(t, &r)| vec![r; t.final_state().plane_len()])
        .collect();
    surrogate(params, batch, weights)
}

/// Gradient of `sum_t log p_t^{ij}` for a single pixel.
fn pixel_score(params: &DenoiserParams, traj: &Trajectory, pixel: usize, weight: f64) -> Result<Vec<f64>> {
    let n = traj.final_state().plane_len();
    let mut onehot = vec![0.0; n];
    onehot[pixel] = 1.0;
    Ok(weighted_trajectory_term(params, traj, &onehot, weight)?.1)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-pixel decomposition of the two estimators on one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct CrosstalkReport {
    /// Flat indices of the pixels in the zero-reward set `A`.
    pub pixels: Vec<usize>,
    /// `|| r^p * grad sum_t log p_t^p ||` for each `p` in `A`.
    pub pxpo_norms: Vec<f64>,
    /// `|| (sum_{q != p} r^q) * grad sum_t log p_t^p ||` for each `p` in `A`:
    /// the weight other pixels' rewards place on `p` under the scalar loss.
    pub ddpo_cross_norms: Vec<f64>,
    /// Cosine similarity of the full pixel-wise and scalar gradients.
    pub cosine_similarity: f64,
}

impl CrosstalkReport {
    pub fn pxpo_total(&self) -> f64 {
        norm(&self.pxpo_norms)
    }

    pub fn ddpo_cross_total(&self) -> f64 {
        norm(&self.ddpo_cross_norms)
    }
}

/// Compares how the pixel-wise and scalar estimators route reward to the
/// pixels whose own reward is zero. Costs one backward sweep per step for
/// every pixel in the zero-reward set, so use small fixtures.
pub fn crosstalk_report(
    params: &DenoiserParams,
    traj: &Trajectory,
    reward: &RewardMap,
) -> Result<CrosstalkReport> {
    let x = traj.final_state();
    if reward.height() != x.height() || reward.width() != x.width() {
        return Err(Error::Dimension("reward map must be at model resolution".into()));
    }
    let r = reward.values.as_slice();
    let total: f64 = r.iter().sum();
    let pixels: Vec<usize> = (0..r.len()).filter(|&i| r[i] == 0.0).collect();
    let mut pxpo_norms = Vec::with_capacity(pixels.len());
    let mut ddpo_cross_norms = Vec::with_capacity(pixels.len());
    for &p in &pixels {
        let score = pixel_score(params, traj, p, 1.0)?;
        let own: Vec<f64> = score.iter().map(|g| g * r[p]).collect();
        pxpo_norms.push(norm(&own));
        ddpo_cross_norms.push((total - r[p]).abs() * norm(&score));
    }

    let (_, g_pxpo) = weighted_trajectory_term(params, traj, r, 1.0)?;
    let (_, g_ddpo) = weighted_trajectory_term(params, traj, &vec![total; r.len()], 1.0)?;
    let dot: f64 = g_pxpo.iter().zip(&g_ddpo).map(|(a, b)| a * b).sum();
    let denom = norm(&g_pxpo) * norm(&g_ddpo);
    let cosine_similarity = if denom > 0.0 { dot / denom } else { 0.0 };
    Ok(CrosstalkReport {
        pixels,
        pxpo_norms,
        ddpo_cross_norms,
        cosine_similarity,
    })
}
