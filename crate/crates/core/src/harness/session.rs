//! One person, one model, one image per epoch: show a sample, take a painted
//! mask, take one step, show the updated sample.

use super::config::TrainConfig;
use super::train::{EpochRecord, Rollouts, RunDir, Trainer};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::net::DenoiserParams;
use crate::policy::RewardMap;
use crate::rewards::decode_human_mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionState {
    /// A sample is on display and no mask has arrived yet.
    AwaitingFeedback,
    /// A mask is pending; the next step will consume it.
    ReadyToStep,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    trainer: Trainer,
    current: Rollouts,
    pending: Option<RewardMap>,
    dir: Option<RunDir>,
}

impl Session {
    /// Starts a session and samples the epoch-0 image. With `dir`, every
    /// step is checkpointed and appended to its reward CSV.
    pub fn new(id: String, mut cfg: TrainConfig, params: DenoiserParams, dir: Option<RunDir>) -> Result<Self> {
        cfg.batch_size = 1;
        let trainer = Trainer::new(cfg, params)?;
        if let Some(d) = &dir {
            d.start(&trainer.cfg, &trainer.params)?;
        }
        let current = trainer.sample()?;
        Ok(Self {
            id,
            trainer,
            current,
            pending: None,
            dir,
        })
    }

    pub fn state(&self) -> SessionState {
        if self.pending.is_some() {
            SessionState::ReadyToStep
        } else {
            SessionState::AwaitingFeedback
        }
    }

    pub fn epoch(&self) -> usize {
        self.trainer.epoch()
    }

    /// The display-space image currently shown, at pixel resolution.
    pub fn image(&self) -> &Grid {
        &self.current.images[0]
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.trainer.records
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.trainer.params
    }

    /// Stores a painted mask for the current image; a later mask replaces an
    /// earlier one until the step is taken.
    pub fn submit_feedback(&mut self, payload: &[u8]) -> Result<()> {
        let img = self.image();
        let map = decode_human_mask(payload, img.height(), img.width())?;
        self.pending = Some(map);
        Ok(())
    }

    /// Runs one epoch on the pending mask. On failure the session is left
    /// exactly as it was, mask included.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let mask = self
            .pending
            .clone()
            .ok_or_else(|| Error::Usage("no feedback submitted for the current sample".into()))?;
        let mut next = self.trainer.clone();
        let record = next.update(self.current.clone(), vec![mask])?;
        let sample = next.sample()?;
        if let Some(d) = &self.dir {
            d.append(&record, &next.params)?;
        }
        self.trainer = next;
        self.current = sample;
        self.pending = None;
        Ok(record)
    }
}
