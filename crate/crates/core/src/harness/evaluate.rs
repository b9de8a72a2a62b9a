use std::path::Path;

use super::config::TrainConfig;
use super::train::{derive_seed, sample_images};
use crate::error::{Error, Result};
use crate::net::{Condition, DenoiserParams};
use crate::rewards::FeedbackSpec;

// Evaluation seeds live in their own stream, away from training epochs.
const EVAL_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Mean of the per-image mean pixel rewards.
    pub mean: f64,
    /// Population standard deviation of the per-image means.
    pub std: f64,
    pub per_image: Vec<f64>,
}

/// Scores `n` seeded samples. With `dump_dir`, every display-space sample is
/// written as `sample_NNNN.pxg` so the metric can be recomputed offline.
pub fn evaluate(
    params: &DenoiserParams,
    cfg: &TrainConfig,
    feedback: &FeedbackSpec,
    n: usize,
    dump_dir: Option<&Path>,
) -> Result<EvalMetrics> {
    if n == 0 {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(cfg.seed, EVAL_STREAM, i)).collect();
    let (_, images) = sample_images(
        params,
        &cfg.schedule()?,
        Condition::new(cfg.class_id, cfg.num_classes)?,
        &seeds,
        (cfg.image_height, cfg.image_width),
    )?;
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
        for (i, img) in images.iter().enumerate() {
            img.save(dir.join(format!("sample_{i:04}.pxg")))?;
        }
    }
    let per_image: Vec<f64> = images
        .iter()
        .map(|img| feedback.evaluate(img).map(|r| r.mean()))
        .collect::<Result<_>>()?;
    let k = per_image.len() as f64;
    let mean = per_image.iter().sum::<f64>() / k;
    let std = (per_image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(EvalMetrics { mean, std, per_image })
}
