//! JSON envelopes. Image rows and mask bytes travel as standard base64.

use base64::Engine;
use pxpo_core::grid::rgb8_bytes;
use pxpo_core::harness::{EpochRecord, Session};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub epoch: usize,
    pub height: usize,
    pub width: usize,
}

impl SessionView {
    pub(crate) fn of(s: &Session) -> Self {
        Self {
            id: s.id.clone(),
            epoch: s.epoch(),
            height: s.image().height(),
            width: s.image().width(),
        }
    }
}

/// The current sample: `height` rows of `width` interleaved RGB bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub session: String,
    pub epoch: usize,
    pub height: usize,
    pub width: usize,
    pub encoding: String,
    pub pixels: String,
}

impl SampleView {
    pub(crate) fn of(s: &Session) -> pxpo_core::Result<Self> {
        let img = s.image();
        Ok(Self {
            session: s.id.clone(),
            epoch: s.epoch(),
            height: img.height(),
            width: img.width(),
            encoding: "rgb8".into(),
            pixels: base64::engine::general_purpose::STANDARD.encode(rgb8_bytes(img)?),
        })
    }

    pub fn decode_pixels(&self) -> Result<Vec<u8>, base64::DecodeError> {
        base64::engine::general_purpose::STANDARD.decode(&self.pixels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBody {
    pub mask: String,
}

impl FeedbackBody {
    pub fn new(mask: &[u8]) -> Self {
        Self {
            mask: base64::engine::general_purpose::STANDARD.encode(mask),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub session: String,
    pub epoch: usize,
    pub pending: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub epoch: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub grad_norm: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

impl From<&EpochRecord> for RecordView {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            mean_reward: r.mean_reward,
            reward_std: r.reward_std,
            grad_norm: r.grad_norm,
            loss: r.loss,
            wall_ms: r.wall_ms,
        }
    }
}

impl From<&RecordView> for EpochRecord {
    fn from(r: &RecordView) -> Self {
        Self {
            epoch: r.epoch,
            mean_reward: r.mean_reward,
            reward_std: r.reward_std,
            grad_norm: r.grad_norm,
            loss: r.loss,
            wall_ms: r.wall_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HealthView {
    pub status: &'static str,
    pub name: &'static str,
    pub version: &'static str,
}
