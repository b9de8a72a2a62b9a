//! Procedural scene corpus and denoising pretraining.
//!
//! Scenes are earthy gradient backgrounds with blue disks ("lakes") and green
//! upward triangles ("trees"). Every sample is regenerated from its seed; the
//! corpus is never stored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::diffusion::{forward_noise, standard_normal_grid, Schedule};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::net::{forward_on_tape, Condition, DenoiserParams, SgdConfig};

pub const LAKE: usize = 0;
pub const FOREST: usize = 1;
pub const LANDSCAPE: usize = 2;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["lake", "forest", "landscape"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disk { cy: f64, cx: f64, radius: f64 },
    /// Upward-pointing isosceles triangle with its apex at `(top, cx)`.
    Triangle { top: f64, cx: f64, height: f64, half_base: f64 },
}

impl Shape {
    /// Whether the pixel centre `(y + 0.5, x + 0.5)` lies inside the shape.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Disk { cy, cx, radius } => {
                let (dy, dx) = (py - cy, px - cx);
                dy * dy + dx * dx <= radius * radius
            }
            Shape::Triangle { top, cx, height, half_base } => {
                let depth = py - top;
                depth >= 0.0 && depth <= height && (px - cx).abs() <= half_base * depth / height
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Grid,
    pub class_id: usize,
    pub gen_seed: u64,
    /// Objects in painting order.
    pub shapes: Vec<Shape>,
}

impl SceneSample {
    /// Flat pixel indices covered by disks and by triangles, as painted
    /// (later shapes occlude earlier ones).
    pub fn object_masks(&self) -> (Vec<bool>, Vec<bool>) {
        let (h, w) = (self.image.height(), self.image.width());
        let mut disk = vec![false; h * w];
        let mut tree = vec![false; h * w];
        for s in &self.shapes {
            for y in 0..h {
                for x in 0..w {
                    if s.contains(y, x) {
                        let i = y * w + x;
                        let is_disk = matches!(s, Shape::Disk { .. });
                        disk[i] = is_disk;
                        tree[i] = !is_disk;
                    }
                }
            }
        }
        (disk, tree)
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Deterministic procedural scene for `(class_id, seed)`.
pub fn generate_scene(class_id: usize, seed: u64, h: usize, w: usize) -> Result<SceneSample> {
    if class_id >= NUM_CLASSES {
        return Err(Error::Config(format!("unknown scene class {class_id}")));
    }
    if h < 8 || w < 8 {
        return Err(Error::Dimension(format!("scenes need at least 8x8 pixels, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class_id as u64) << 56));
    let top = jitter(&mut rng, [0.78, 0.7, 0.55], 0.06);
    let bottom = jitter(&mut rng, [0.55, 0.42, 0.28], 0.06);
    let scale = h.min(w) as f64 / 24.0;
    let (hf, wf) = (h as f64, w as f64);

    let disk = |rng: &mut ChaCha8Rng| {
        let radius = rng.gen_range(4.0..7.0) * scale;
        Shape::Disk {
            cy: rng.gen_range(radius * 0.6..hf - radius * 0.6),
            cx: rng.gen_range(radius * 0.6..wf - radius * 0.6),
            radius,
        }
    };
    let tree = |rng: &mut ChaCha8Rng| {
        let height = rng.gen_range(5.0..9.0) * scale;
        Shape::Triangle {
            top: rng.gen_range(0.0..hf - height),
            cx: rng.gen_range(2.0 * scale..wf - 2.0 * scale),
            height,
            half_base: rng.gen_range(2.0..3.5) * scale,
        }
    };
    let mut shapes = Vec::new();
    match class_id {
        LAKE => {
            for _ in 0..rng.gen_range(1..=2) {
                shapes.push(disk(&mut rng));
            }
        }
        FOREST => {
            for _ in 0..rng.gen_range(3..=6) {
                shapes.push(tree(&mut rng));
            }
        }
        _ => {
            shapes.push(disk(&mut rng));
            for _ in 0..rng.gen_range(2..=4) {
                shapes.push(tree(&mut rng));
            }
        }
    }
    let colours: Vec<[f64; 3]> = shapes
        .iter()
        .map(|s| match s {
            Shape::Disk { .. } => jitter(&mut rng, [0.15, 0.3, 0.82], 0.05),
            Shape::Triangle { .. } => jitter(&mut rng, [0.16, 0.58, 0.18], 0.06),
        })
        .collect();

    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        let t = y as f64 / (h - 1) as f64;
        for x in 0..w {
            let mut px: [f64; 3] = std::array::from_fn(|c| top[c] + t * (bottom[c] - top[c]));
            for (s, col) in shapes.iter().zip(&colours) {
                if s.contains(y, x) {
                    px = *col;
                }
            }
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c];
            }
        }
    }
    Ok(SceneSample {
        image: Grid::from_vec(3, h, w, data)?,
        class_id,
        gen_seed: seed,
        shapes,
    })
}

/// Display space `[0, 1]` to the model's `[-1, 1]`.
pub fn to_model_space(image: &Grid) -> Result<Grid> {
    image.map(|v| 2.0 * v - 1.0)
}

/// Model space back to display space, clamped to `[0, 1]`.
pub fn to_display_space(x: &Grid) -> Result<Grid> {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Per-pixel flags for blue-dominant ("water") and green-dominant
/// ("vegetation") colours.
pub fn dominant_colour_masks(image: &Grid) -> Result<(Vec<bool>, Vec<bool>)> {
    if image.channels() != 3 {
        return Err(Error::Dimension("colour masks need an RGB image".into()));
    }
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let blue = (0..r.len()).map(|i| b[i] > r[i].max(g[i]) + 0.1).collect();
    let green = (0..r.len()).map(|i| g[i] > r[i].max(b[i]) + 0.1).collect();
    Ok((blue, green))
}

/// Fractions of blue-dominant and green-dominant pixels.
pub fn colour_features(image: &Grid) -> Result<[f64; 2]> {
    let (blue, green) = dominant_colour_masks(image)?;
    let frac = |m: &[bool]| m.iter().filter(|&&v| v).count() as f64 / m.len() as f64;
    Ok([frac(&blue), frac(&green)])
}

/// Nearest-centroid scene classifier over [`colour_features`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneClassifier {
    pub centroids: Vec<[f64; 2]>,
}

impl SceneClassifier {
    /// Fits class centroids on `per_class` generated scenes of each class.
    pub fn calibrate(h: usize, w: usize, per_class: usize, seed: u64) -> Result<Self> {
        let centroids = (0..NUM_CLASSES)
            .map(|c| {
                let mut acc = [0.0; 2];
                for i in 0..per_class {
                    let s = generate_scene(c, seed.wrapping_add(i as u64), h, w)?;
                    let f = colour_features(&s.image)?;
                    acc[0] += f[0];
                    acc[1] += f[1];
                }
                Ok(acc.map(|v| v / per_class as f64))
            })
            .collect::<Result<_>>()?;
        Ok(Self { centroids })
    }

    pub fn classify(&self, image: &Grid) -> Result<usize> {
        let f = colour_features(image)?;
        let dist = |c: &[f64; 2]| (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2);
        Ok((0..self.centroids.len())
            .min_by(|&a, &b| dist(&self.centroids[a]).total_cmp(&dist(&self.centroids[b])))
            .expect("at least one class"))
    }
}

/// Per-channel mean of a batch of images, with the standard deviation of the
/// per-image channel means.
pub fn channel_statistics(images: &[Grid]) -> Vec<(f64, f64)> {
    let channels = images.first().map_or(0, Grid::channels);
    (0..channels)
        .map(|c| {
            let means: Vec<f64> = images
                .iter()
                .map(|g| g.plane(c).iter().sum::<f64>() / g.plane_len() as f64)
                .collect();
            let n = means.len() as f64;
            let mean = means.iter().sum::<f64>() / n;
            let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub seed: u64,
    /// Final (windowed) loss must fall below this.
    pub loss_threshold: f64,
    /// Number of trailing steps averaged for the final loss.
    pub window: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 8,
            optimizer: SgdConfig {
                lr: 0.05,
                clip_norm: 10.0,
                momentum: 0.9,
            },
            seed: 0,
            loss_threshold: 0.25,
            window: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Pre-clipping gradient norm per step.
    pub grad_norms: Vec<f64>,
    pub final_loss: f64,
    pub below_threshold: bool,
}

impl PretrainReport {
    /// Mean of `losses[start..end]`.
    pub fn window_mean(&self, start: usize, end: usize) -> f64 {
        let w = &self.losses[start..end.min(self.losses.len())];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

fn denoising_example(
    params: &DenoiserParams,
    sched: &Schedule,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let spec = &params.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_id = rng.gen_range(0..spec.num_classes.min(NUM_CLASSES));
    let scene = generate_scene(class_id, rng.gen(), spec.height, spec.width)?;
    let x0 = to_model_space(&scene.image)?;
    let s = rng.gen_range(0..sched.len());
    let eps = standard_normal_grid(&mut rng, spec.image_channels, spec.height, spec.width);
    let xt = forward_noise(&x0, s, &eps, sched)?;
    let mut tape = Tape::new();
    let out = forward_on_tape(params, &xt, sched.model_steps[s], Condition { class_id }, &mut tape)?;
    let loss = tape.mse(out, eps.as_slice());
    let value = tape.value(loss)[0];
    let mut grads = vec![0.0; params.num_params()];
    tape.backward(loss, &[1.0], &mut grads)?;
    Ok((value, grads))
}

/// Trains the denoiser to predict the noise added to corpus scenes.
pub fn pretrain(
    params: &mut DenoiserParams,
    sched: &Schedule,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if params.spec.image_channels != 3 {
        return Err(Error::Config("scene corpus is RGB; the network must have 3 channels".into()));
    }
    if cfg.batch_size == 0 || cfg.window == 0 {
        return Err(Error::Config("batch size and window must be positive".into()));
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let base = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((step as u64) << 20);
        let frozen: &DenoiserParams = params;
        let parts: Vec<(f64, Vec<f64>)> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|i| denoising_example(frozen, sched, base.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        let k = 1.0 / cfg.batch_size as f64;
        let mut loss = 0.0;
        for (v, g) in &parts {
            loss += k * v;
            params.add_grads(g);
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("pretraining loss diverged at step {step}")));
        }
        params.scale_grads(k);
        grad_norms.push(params.sgd_step(&cfg.optimizer)?);
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
        losses.push(loss);
    }
    let start = losses.len().saturating_sub(cfg.window);
    let final_loss = if losses.is_empty() {
        f64::NAN
    } else {
        losses[start..].iter().sum::<f64>() / (losses.len() - start) as f64
    };
    Ok(PretrainReport {
        below_threshold: final_loss < cfg.loss_threshold,
        losses,
        grad_norms,
        final_loss,
    })
}
