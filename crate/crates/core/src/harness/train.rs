//! The on-policy fine-tuning loop: sample, query feedback, resample to model
//! resolution, optionally standardise, weight log-densities, one SGD step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{Mode, TrainConfig};
use crate::datasets::to_display_space;
use crate::diffusion::{sample_trajectory, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{write_ppm, Grid};
use crate::net::{Condition, DenoiserParams};
use crate::policy::{
    ddpo_surrogate_loss, pxpo_surrogate_loss, standardize_rewards, RewardMap, RolloutBatch,
};
use crate::rewards::{resample_feedback, FeedbackProvider};

/// Mixes a run seed with an epoch and a batch index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed
        ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f).rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over all pixels of all images, before standardisation.
    pub mean_reward: f64,
    /// Standard deviation of the per-image mean rewards.
    pub reward_std: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,mean_reward,reward_std,grad_norm,loss,wall_ms";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{}",
            self.epoch, self.mean_reward, self.reward_std, self.grad_norm, self.loss, self.wall_ms
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::format("reward csv", format!("bad row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            mean_reward: num(f[1])?,
            reward_std: num(f[2])?,
            grad_norm: num(f[3])?,
            loss: num(f[4])?,
            wall_ms: f[5].parse().map_err(|_| bad())?,
        })
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| EpochRecord { wall_ms: 0, ..r.clone() };
        strip(self) == strip(other)
    }
}

/// Mean of per-image means and their population standard deviation.
pub fn reward_summary(maps: &[RewardMap]) -> (f64, f64) {
    let means: Vec<f64> = maps.iter().map(RewardMap::mean).collect();
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rollouts of one epoch, with their display-space images at pixel resolution.
#[derive(Clone, Debug)]
pub struct Rollouts {
    pub epoch: usize,
    pub trajectories: Vec<Trajectory>,
    pub images: Vec<Grid>,
}

/// Samples `n` images and converts them to display space at pixel resolution.
pub fn sample_images(
    params: &DenoiserParams,
    sched: &Schedule,
    condition: Condition,
    seeds: &[u64],
    pixel_size: (usize, usize),
) -> Result<(Vec<Trajectory>, Vec<Grid>)> {
    let trajectories: Vec<Trajectory> = seeds
        .par_iter()
        .map(|&s| sample_trajectory(params, condition, sched, s))
        .collect::<Result<_>>()?;
    let images = trajectories
        .iter()
        .map(|t| {
            let img = to_display_space(t.final_state())?;
            if (img.height(), img.width()) == pixel_size {
                Ok(img)
            } else {
                img.resample_channels(pixel_size.0, pixel_size.1)
            }
        })
        .collect::<Result<_>>()?;
    Ok((trajectories, images))
}

/// Owns the parameters being fine-tuned and the epoch counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: DenoiserParams,
    pub schedule: Schedule,
    pub records: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, params: DenoiserParams) -> Result<Self> {
        cfg.validate()?;
        if params.spec != cfg.net_spec() {
            return Err(Error::Config(format!(
                "checkpoint network {:?} does not match the configured {:?}",
                params.spec,
                cfg.net_spec()
            )));
        }
        let schedule = cfg.schedule()?;
        Ok(Self {
            cfg,
            params,
            schedule,
            records: Vec::new(),
        })
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.records.len()
    }

    pub fn rollout_seeds(&self, epoch: usize) -> Vec<u64> {
        let e = if self.cfg.fixed_noise { 0 } else { epoch as u64 };
        (0..self.cfg.batch_size as u64)
            .map(|i| derive_seed(self.cfg.seed, e, i))
            .collect()
    }

    /// On-policy rollouts for the next epoch.
    pub fn sample(&self) -> Result<Rollouts> {
        let epoch = self.epoch();
        let (trajectories, images) = sample_images(
            &self.params,
            &self.schedule,
            Condition::new(self.cfg.class_id, self.cfg.num_classes)?,
            &self.rollout_seeds(epoch),
            (self.cfg.image_height, self.cfg.image_width),
        )?;
        Ok(Rollouts {
            epoch,
            trajectories,
            images,
        })
    }

    /// One policy-gradient step from pixel-resolution feedback.
    pub fn update(&mut self, rollouts: Rollouts, feedback: Vec<RewardMap>) -> Result<EpochRecord> {
        let start = Instant::now();
        if rollouts.epoch != self.epoch() {
            return Err(Error::Usage(format!(
                "rollouts from epoch {} cannot update epoch {} (samples are not reused)",
                rollouts.epoch,
                self.epoch()
            )));
        }
        if feedback.len() != rollouts.trajectories.len() {
            return Err(Error::Dimension(format!(
                "{} reward maps for {} samples",
                feedback.len(),
                rollouts.trajectories.len()
            )));
        }
        let (mean_reward, reward_std) = reward_summary(&feedback);
        let (mh, mw) = (self.cfg.model_height(), self.cfg.model_width());
        let mut model: Vec<RewardMap> = feedback
            .iter()
            .map(|r| resample_feedback(r, mh, mw))
            .collect::<Result<_>>()?;
        if self.cfg.standardize {
            model = standardize_rewards(&model)?;
        }
        let batch = RolloutBatch::new(rollouts.trajectories, model)?;

        self.params.zero_grad();
        let loss = match self.cfg.mode {
            Mode::Pxpo => pxpo_surrogate_loss(&mut self.params, &batch)?,
            Mode::Ddpo => ddpo_surrogate_loss(&mut self.params, &batch)?,
        };
        if self.cfg.grad_scale != 1.0 {
            self.params.scale_grads(self.cfg.grad_scale);
        }
        let grad_norm = self
            .params
            .sgd_step(&self.cfg.optimizer())
            .map_err(|e| match e {
                Error::Training(m) => Error::Numeric(m),
                other => other,
            })?;
        let record = EpochRecord {
            epoch: rollouts.epoch,
            mean_reward,
            reward_std,
            grad_norm,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn run_epoch(&mut self, provider: &mut dyn FeedbackProvider) -> Result<(EpochRecord, Rollouts)> {
        let start = Instant::now();
        let rollouts = self.sample()?;
        let feedback = provider.feedback(rollouts.epoch, &rollouts.images)?;
        let kept = Rollouts {
            epoch: rollouts.epoch,
            trajectories: Vec::new(),
            images: rollouts.images.clone(),
        };
        let mut record = self.update(rollouts, feedback)?;
        record.wall_ms = start.elapsed().as_millis() as u64;
        if let Some(last) = self.records.last_mut() {
            last.wall_ms = record.wall_ms;
        }
        Ok((record, kept))
    }
}

/// Files of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("samples"))?;
        Ok(Self { root })
    }

    pub fn csv_path(&self) -> PathBuf {
        self.root.join("rewards.csv")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn sample_path(&self, epoch: usize, index: usize) -> PathBuf {
        self.root.join("samples").join(format!("epoch_{epoch:04}_{index:02}.ppm"))
    }

    pub fn start(&self, cfg: &TrainConfig, params: &DenoiserParams) -> Result<()> {
        fs::write(self.root.join("config.ini"), cfg.to_text())?;
        fs::write(self.csv_path(), format!("{}\n", EpochRecord::CSV_HEADER))?;
        params.save_checkpoint(self.checkpoint_path(0))
    }

    /// Checkpoint first, then the CSV row, so a row always has its checkpoint.
    pub fn append(&self, record: &EpochRecord, params: &DenoiserParams) -> Result<()> {
        params.save_checkpoint(self.checkpoint_path(record.epoch + 1))?;
        let mut f = OpenOptions::new().append(true).open(self.csv_path())?;
        writeln!(f, "{}", record.to_csv())?;
        Ok(())
    }

    pub fn write_samples(&self, epoch: usize, images: &[Grid], limit: usize) -> Result<()> {
        for (i, img) in images.iter().take(limit).enumerate() {
            let mut w = BufWriter::new(File::create(self.sample_path(epoch, i))?);
            write_ppm(img, &mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn read_records(&self) -> Result<Vec<EpochRecord>> {
        let text = fs::read_to_string(self.csv_path())?;
        let mut lines = text.lines();
        if lines.next() != Some(EpochRecord::CSV_HEADER) {
            return Err(Error::format("reward csv", "missing header"));
        }
        let records: Vec<EpochRecord> = lines
            .filter(|l| !l.trim().is_empty())
            .map(EpochRecord::from_csv)
            .collect::<Result<_>>()?;
        for (i, r) in records.iter().enumerate() {
            if r.epoch != i {
                return Err(Error::format("reward csv", "epochs are not consecutive"));
            }
        }
        Ok(records)
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub records: Vec<EpochRecord>,
    pub params: DenoiserParams,
    pub output_dir: Option<PathBuf>,
}

impl RunReport {
    /// Mean of `mean_reward` over the given epochs.
    pub fn window_mean(&self, epochs: std::ops::Range<usize>) -> f64 {
        let w = &self.records[epochs];
        w.iter().map(|r| r.mean_reward).sum::<f64>() / w.len() as f64
    }
}

fn drive(
    mut trainer: Trainer,
    provider: &mut dyn FeedbackProvider,
    dir: Option<&RunDir>,
) -> Result<RunReport> {
    while trainer.epoch() < trainer.cfg.epochs {
        let (record, rollouts) = trainer.run_epoch(provider)?;
        log::info!(
            "epoch {}: mean reward {:.5} (std {:.5}), grad norm {:.4}",
            record.epoch,
            record.mean_reward,
            record.reward_std,
            record.grad_norm
        );
        if let Some(dir) = dir {
            dir.append(&record, &trainer.params)?;
            if trainer.cfg.save_samples {
                dir.write_samples(record.epoch, &rollouts.images, 4)?;
            }
        }
    }
    Ok(RunReport {
        records: trainer.records,
        params: trainer.params,
        output_dir: dir.map(|d| d.root.clone()),
    })
}

/// Runs every configured epoch in memory, without touching the filesystem.
pub fn train_in_memory(
    cfg: &TrainConfig,
    params: DenoiserParams,
    provider: &mut dyn FeedbackProvider,
) -> Result<RunReport> {
    drive(Trainer::new(cfg.clone(), params)?, provider, None)
}

fn load_pretrained(cfg: &TrainConfig) -> Result<DenoiserParams> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("fine-tuning needs a pretrained checkpoint".into()))?;
    DenoiserParams::load_checkpoint(path)
}

/// Fine-tunes the configured checkpoint, writing checkpoints, sample images
/// and the reward CSV to the output directory. On failure the directory
/// holds the last completed epoch.
pub fn run_rl_training(cfg: &TrainConfig, provider: &mut dyn FeedbackProvider) -> Result<RunReport> {
    let trainer = Trainer::new(cfg.clone(), load_pretrained(cfg)?)?;
    let dir = RunDir::create(cfg.resolved_output_dir())?;
    dir.start(cfg, &trainer.params)?;
    drive(trainer, provider, Some(&dir))
}

/// Continues a run from the last epoch recorded in its output directory.
pub fn resume_rl_training(cfg: &TrainConfig, provider: &mut dyn FeedbackProvider) -> Result<RunReport> {
    if cfg.momentum != 0.0 {
        return Err(Error::Config(
            "momentum state is not checkpointed; resume needs momentum = 0".into(),
        ));
    }
    let dir = RunDir::create(cfg.resolved_output_dir())?;
    let records = dir.read_records()?;
    let params = DenoiserParams::load_checkpoint(dir.checkpoint_path(records.len()))?;
    let mut trainer = Trainer::new(cfg.clone(), params)?;
    trainer.records = records;
    drive(trainer, provider, Some(&dir))
}

/// Pretrains a fresh network as configured.
pub fn run_pretraining(cfg: &TrainConfig) -> Result<(DenoiserParams, crate::datasets::PretrainReport)> {
    cfg.validate()?;
    let mut params = DenoiserParams::init(cfg.net_spec(), cfg.init_seed)?;
    let report = crate::datasets::pretrain(&mut params, &cfg.training_schedule()?, &cfg.pretrain_config())?;
    Ok((params, report))
}

/// Writes a pretraining loss curve as `step,loss,grad_norm`.
pub fn write_loss_curve(path: &Path, report: &crate::datasets::PretrainReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss,grad_norm")?;
    for (i, (l, g)) in report.losses.iter().zip(&report.grad_norms).enumerate() {
        writeln!(w, "{i},{l:?},{g:?}")?;
    }
    w.flush()?;
    Ok(())
}
