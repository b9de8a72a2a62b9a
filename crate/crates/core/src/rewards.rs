//! Black-box per-pixel feedback providers.
//!
//! Providers see images in display space (`[0, 1]`, pixel resolution) and
//! return single-channel reward maps tagged [`Resolution::Pixel`]. The trainer
//! resamples them to model resolution with [`resample_feedback`].

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::grid::{read_pgm_bytes, Grid, PnmImage};
use crate::policy::{Resolution, RewardMap};

/// Reward carried by a positive or negative brush stroke.
pub const HUMAN_REWARD: f64 = 2.0;

pub const MASK_NEUTRAL: u8 = 0;
pub const MASK_POSITIVE: u8 = 1;
pub const MASK_NEGATIVE: u8 = 2;

/// Penalises the intensity of one colour channel.
pub fn channel_penalty(x0: &Grid, channel: usize, gain: f64) -> Result<RewardMap> {
    if channel >= x0.channels() {
        return Err(Error::Index(format!(
            "channel {channel} out of range for {} channels",
            x0.channels()
        )));
    }
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::Config(format!("penalty gain must be positive, got {gain}")));
    }
    let plane = x0.plane(channel);
    let values = plane.iter().map(|v| -gain * v.clamp(0.0, 1.0)).collect();
    RewardMap::pixel(Grid::from_vec(1, x0.height(), x0.width(), values)?)
}

/// Settings of the disk detector standing in for a semantic segmenter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmenterConfig {
    /// Gain on `blue - max(red, green)` before clamping to `[0, 1]`.
    pub affinity_gain: f64,
    /// Radius of the disk template averaged over the affinity map.
    pub template_radius: f64,
    /// Soft threshold on the template response.
    pub threshold: f64,
    pub softness: f64,
    /// Detections are dilated by this radius so object borders are covered.
    pub spread_radius: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            affinity_gain: 3.0,
            template_radius: 2.0,
            threshold: 0.5,
            softness: 0.08,
            spread_radius: 1.5,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.affinity_gain, self.template_radius, self.softness];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || !(self.spread_radius.is_finite() && self.spread_radius >= 0.0)
            || !self.threshold.is_finite()
        {
            return Err(Error::Config(format!("invalid segmenter settings {self:?}")));
        }
        Ok(())
    }
}

fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.floor() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Applies `f` to the in-bounds values of a disk neighbourhood of every pixel.
fn neighbourhood(
    plane: &[f64],
    h: usize,
    w: usize,
    radius: f64,
    f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64,
) -> Vec<f64> {
    let offsets = disk_offsets(radius);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut it = offsets.iter().filter_map(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
                    .then(|| plane[yy as usize * w + xx as usize])
            });
            out[y * w + x] = f(&mut it);
        }
    }
    out
}

/// Per-pixel confidence in `[0, 1]` that a pixel belongs to a blue blob.
pub fn segmenter_confidence(image: &Grid, cfg: &SegmenterConfig) -> Result<Grid> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    let affinity: Vec<f64> = match image.channels() {
        1 => image.plane(0).iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        3 => {
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            (0..h * w)
                .map(|i| (cfg.affinity_gain * (b[i] - r[i].max(g[i]))).clamp(0.0, 1.0))
                .collect()
        }
        c => {
            return Err(Error::Dimension(format!(
                "segmenter expects 1 or 3 channels, got {c}"
            )))
        }
    };
    let response = neighbourhood(&affinity, h, w, cfg.template_radius, |it| {
        let (mut sum, mut n) = (0.0, 0.0);
        for v in it {
            sum += v;
            n += 1.0;
        }
        sum / n
    });
    let gate: Vec<f64> = response
        .iter()
        .map(|s| sigmoid((s - cfg.threshold) / cfg.softness))
        .collect();
    let spread = neighbourhood(&gate, h, w, cfg.spread_radius, |it| it.fold(0.0, f64::max));
    let confidence = affinity.iter().zip(&spread).map(|(a, g)| a * g).collect();
    Grid::from_vec(1, h, w, confidence)
}

/// Negative reward proportional to the detector's confidence.
pub fn toy_segmenter_reward(x0: &Grid, cfg: &SegmenterConfig) -> Result<RewardMap> {
    let conf = segmenter_confidence(x0, cfg)?;
    RewardMap::pixel(conf.map(|c| -c)?)
}

/// Decodes a painted mask: 0 neutral, 1 positive (+2), 2 negative (-2).
pub fn decode_human_mask(payload: &[u8], h: usize, w: usize) -> Result<RewardMap> {
    let n = h
        .checked_mul(w)
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Protocol(format!("invalid mask size {h}x{w}")))?;
    if payload.len() != n {
        return Err(Error::Protocol(format!(
            "mask has {} bytes, expected {n} for {h}x{w}",
            payload.len()
        )));
    }
    let values = payload
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            MASK_NEUTRAL => Ok(0.0),
            MASK_POSITIVE => Ok(HUMAN_REWARD),
            MASK_NEGATIVE => Ok(-HUMAN_REWARD),
            other => Err(Error::Protocol(format!("mask byte {other} at offset {i}"))),
        })
        .collect::<Result<_>>()?;
    RewardMap::pixel(Grid::from_vec(1, h, w, values)?)
}

/// Inverse of [`decode_human_mask`] for maps holding only `{-2, 0, +2}`.
pub fn encode_human_mask(map: &RewardMap) -> Result<Vec<u8>> {
    map.values
        .as_slice()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(MASK_NEUTRAL)
            } else if v == HUMAN_REWARD {
                Ok(MASK_POSITIVE)
            } else if v == -HUMAN_REWARD {
                Ok(MASK_NEGATIVE)
            } else {
                Err(Error::Protocol(format!("{v} is not a brush value")))
            }
        })
        .collect()
}

/// Reads a mask stored as a PGM whose samples use the wire coding.
pub fn decode_mask_pgm(bytes: &[u8]) -> Result<RewardMap> {
    let img = read_pgm_bytes(bytes)?;
    decode_human_mask(&img.pixels, img.height, img.width)
}

pub fn encode_mask_pgm(map: &RewardMap) -> Result<Vec<u8>> {
    Ok(PnmImage {
        width: map.width(),
        height: map.height(),
        maxval: 2,
        pixels: encode_human_mask(map)?,
    }
    .encode_pgm())
}

/// Interpolates pixel-resolution feedback down (or up) to model resolution.
pub fn resample_feedback(r: &RewardMap, model_h: usize, model_w: usize) -> Result<RewardMap> {
    if r.resolution != Resolution::Pixel {
        return Err(Error::Usage("feedback is already at model resolution".into()));
    }
    RewardMap::model(r.values.resample_bilinear(model_h, model_w)?)
}

/// Which feedback function to query and how.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedbackSpec {
    /// Always zero; handy as a control.
    Zero,
    ChannelPenalty { channel: usize, gain: f64 },
    ToySegmenter(SegmenterConfig),
    /// A fixed painted mask applied to every image.
    HumanMask { payload: Vec<u8>, height: usize, width: usize },
}

impl FeedbackSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            FeedbackSpec::Zero => Ok(()),
            FeedbackSpec::ChannelPenalty { gain, .. } => {
                if gain.is_finite() && *gain > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("penalty gain must be positive, got {gain}")))
                }
            }
            FeedbackSpec::ToySegmenter(cfg) => cfg.validate(),
            FeedbackSpec::HumanMask { payload, height, width } => {
                decode_human_mask(payload, *height, *width).map(|_| ())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeedbackSpec::Zero => "zero",
            FeedbackSpec::ChannelPenalty { .. } => "channel_penalty",
            FeedbackSpec::ToySegmenter(_) => "toy_segmenter",
            FeedbackSpec::HumanMask { .. } => "human_mask",
        }
    }

    /// Rewards for one display-space image at pixel resolution.
    pub fn evaluate(&self, image: &Grid) -> Result<RewardMap> {
        match self {
            FeedbackSpec::Zero => RewardMap::pixel(Grid::zeros(1, image.height(), image.width())?),
            FeedbackSpec::ChannelPenalty { channel, gain } => channel_penalty(image, *channel, *gain),
            FeedbackSpec::ToySegmenter(cfg) => toy_segmenter_reward(image, cfg),
            FeedbackSpec::HumanMask { payload, height, width } => {
                let map = decode_human_mask(payload, *height, *width)?;
                if map.height() != image.height() || map.width() != image.width() {
                    return Err(Error::Dimension(format!(
                        "mask is {height}x{width} but the image is {}x{}",
                        image.height(),
                        image.width()
                    )));
                }
                Ok(map)
            }
        }
    }
}

/// Anything that can score a batch of images pixel by pixel.
pub trait FeedbackProvider {
    /// `images` are display-space samples of one epoch; one map per image.
    fn feedback(&mut self, epoch: usize, images: &[Grid]) -> Result<Vec<RewardMap>>;
}

impl FeedbackProvider for FeedbackSpec {
    fn feedback(&mut self, _epoch: usize, images: &[Grid]) -> Result<Vec<RewardMap>> {
        images.iter().map(|img| self.evaluate(img)).collect()
    }
}
