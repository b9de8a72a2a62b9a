//! The noise-prediction network `eps(x_t, t, c)` and its flat parameter
//! vector, which is the policy being fine-tuned.
//!
//! Layout: a full-resolution input convolution, one stride-2 downsample, two
//! residual convolutions at half resolution, nearest upsample with a skip
//! connection, and a zero-initialised output convolution. Timestep
//! (sinusoidal, projected) and class embeddings are added channel-wise at both
//! resolutions.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvShape, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub image_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub time_dim: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            image_channels: 3,
            height: 24,
            width: 24,
            base_channels: 32,
            num_classes: 3,
            time_dim: 16,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("network channel and class counts must be positive".into()));
        }
        if self.height < 2 || self.width < 2 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model resolution must be even and at least 2, got {}x{}",
                self.height, self.width
            )));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time embedding size must be even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Embedding,
    Conv3x3 { stride: usize },
}

impl LayerKind {
    fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Embedding => "embedding",
            LayerKind::Conv3x3 { stride: 1 } => "conv3x3",
            LayerKind::Conv3x3 { .. } => "conv3x3s2",
        }
    }
}

/// One parameter block: weights (and, except for embeddings, a bias) stored
/// contiguously at `offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// `[out, in]` for linear, `[rows, dim]` for embeddings,
    /// `[out, in, 3, 3]` for convolutions.
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Embedding => 0,
            _ => self.shape[0],
        }
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layer_table(spec: &NetSpec) -> Vec<LayerSpec> {
    let c = spec.base_channels;
    let ic = spec.image_channels;
    let mut out = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, kind: LayerKind, shape: Vec<usize>| {
        let l = LayerSpec {
            name: name.to_string(),
            kind,
            shape,
            offset,
        };
        offset += l.len();
        out.push(l);
    };
    push("time_full", LayerKind::Linear, vec![c, spec.time_dim]);
    push("time_half", LayerKind::Linear, vec![c, spec.time_dim]);
    push("class_full", LayerKind::Embedding, vec![spec.num_classes, c]);
    push("class_half", LayerKind::Embedding, vec![spec.num_classes, c]);
    push("conv_in", LayerKind::Conv3x3 { stride: 1 }, vec![c, ic, 3, 3]);
    push("down", LayerKind::Conv3x3 { stride: 2 }, vec![c, c, 3, 3]);
    push("mid1", LayerKind::Conv3x3 { stride: 1 }, vec![c, c, 3, 3]);
    push("mid2", LayerKind::Conv3x3 { stride: 1 }, vec![c, c, 3, 3]);
    push("conv_out", LayerKind::Conv3x3 { stride: 1 }, vec![ic, c, 3, 3]);
    out
}

/// Class conditioning `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Condition {
    pub class_id: usize,
}

impl Condition {
    pub fn new(class_id: usize, num_classes: usize) -> Result<Self> {
        if class_id >= num_classes {
            return Err(Error::Config(format!(
                "class {class_id} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { class_id })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            clip_norm: 1.0,
            momentum: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub spec: NetSpec,
    pub layers: Vec<LayerSpec>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    velocity: Vec<f64>,
}

impl DenoiserParams {
    /// Random initialisation; the output convolution starts at zero so the
    /// untrained network predicts zero noise.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &p.layers {
            if layer.name == "conv_out" {
                continue;
            }
            let fan_in = match layer.kind {
                LayerKind::Linear => layer.shape[1],
                LayerKind::Embedding => 1,
                LayerKind::Conv3x3 { .. } => layer.shape[1] * 9,
            };
            let std = match layer.kind {
                LayerKind::Embedding => 0.1,
                _ => (1.0 / fan_in as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut p.values[layer.offset..layer.offset + layer.weight_len()] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let layers = layer_table(&spec);
        let n = layers.last().map_or(0, |l| l.offset + l.len());
        Ok(Self {
            spec,
            layers,
            values: vec![0.0; n],
            grads: vec![0.0; n],
            velocity: Vec::new(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn layer(&self, name: &str) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .unwrap_or_else(|| panic!("no layer named {name}"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add_grads(&mut self, other: &[f64]) {
        for (g, o) in self.grads.iter_mut().zip(other) {
            *g += o;
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for g in &mut self.grads {
            *g *= k;
        }
    }

    /// One SGD step with global-norm gradient clipping. Returns the gradient
    /// norm before clipping. Gradients are zeroed afterwards.
    pub fn sgd_step(&mut self, cfg: &SgdConfig) -> Result<f64> {
        if !(cfg.lr > 0.0) || !(cfg.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if self.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training("non-finite gradient, step refused".into()));
        }
        let norm = self.grad_norm();
        let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        if cfg.momentum > 0.0 {
            if self.velocity.len() != self.values.len() {
                self.velocity = vec![0.0; self.values.len()];
            }
            for ((v, g), vel) in self.values.iter_mut().zip(&self.grads).zip(&mut self.velocity) {
                *vel = cfg.momentum * *vel + scale * g;
                *v -= cfg.lr * *vel;
            }
        } else {
            for (v, g) in self.values.iter_mut().zip(&self.grads) {
                *v -= cfg.lr * scale * g;
            }
        }
        self.zero_grad();
        Ok(norm)
    }

    pub fn check_input(&self, x: &Grid) -> Result<()> {
        let s = &self.spec;
        if x.shape() != (s.image_channels, s.height, s.width) {
            return Err(Error::Dimension(format!(
                "network expects {}x{}x{}, got {:?}",
                s.image_channels,
                s.height,
                s.width,
                x.shape()
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a (model) timestep index.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Records the network forward pass on `tape` and returns the predicted noise.
pub fn forward_on_tape(
    params: &DenoiserParams,
    x: &Grid,
    model_t: usize,
    c: Condition,
    tape: &mut Tape,
) -> Result<Var> {
    params.check_input(x)?;
    let s = &params.spec;
    if c.class_id >= s.num_classes {
        return Err(Error::Index(format!("class {} out of range", c.class_id)));
    }
    let (h, w, ch) = (s.height, s.width, s.base_channels);
    let theta = &params.values;

    let load = |tape: &mut Tape, name: &str| -> (Var, Var) {
        let l = params.layer(name);
        let wv = tape.param(theta, l.offset, l.weight_len());
        let bv = tape.param(theta, l.offset + l.weight_len(), l.bias_len());
        (wv, bv)
    };
    let embedding = |tape: &mut Tape, name: &str| -> Var {
        let l = params.layer(name);
        let dim = l.shape[1];
        tape.param(theta, l.offset + c.class_id * dim, dim)
    };
    let conv = |tape: &mut Tape, input: Var, name: &str, cin: usize, cout: usize, hh: usize, ww: usize| {
        let l = params.layer(name);
        let stride = match l.kind {
            LayerKind::Conv3x3 { stride } => stride,
            _ => unreachable!(),
        };
        let (wv, bv) = load(tape, name);
        tape.conv3x3(
            input,
            wv,
            bv,
            ConvShape {
                in_channels: cin,
                out_channels: cout,
                height: hh,
                width: ww,
                stride,
            },
        )
    };

    let temb = tape.constant(timestep_embedding(model_t, s.time_dim));
    let (tw, tb) = load(tape, "time_full");
    let t_full = tape.linear(temb, tw, tb);
    let (tw, tb) = load(tape, "time_half");
    let t_half = tape.linear(temb, tw, tb);
    let c_full = embedding(tape, "class_full");
    let c_half = embedding(tape, "class_half");
    let e_full = tape.add(t_full, c_full);
    let e_half = tape.add(t_half, c_half);

    let input = tape.constant(x.as_slice().to_vec());
    let h0 = conv(tape, input, "conv_in", s.image_channels, ch, h, w);
    let h0 = tape.add_channel(h0, e_full);
    let h0 = tape.silu(h0);

    let (hh, hw) = (h / 2, w / 2);
    let h1 = conv(tape, h0, "down", ch, ch, h, w);
    let h1 = tape.add_channel(h1, e_half);
    let h1 = tape.silu(h1);
    let h2 = conv(tape, h1, "mid1", ch, ch, hh, hw);
    let h2 = tape.silu(h2);
    let h3 = conv(tape, h2, "mid2", ch, ch, hh, hw);
    let h3 = tape.silu(h3);
    let h3 = tape.add(h3, h1);

    let up = tape.upsample2x(h3, ch, hh, hw);
    let u = tape.add(up, h0);
    let u = tape.silu(u);
    Ok(conv(tape, u, "conv_out", ch, s.image_channels, h, w))
}

/// Predicts the noise in `x` at model timestep `model_t`. When `tape` is
/// given the forward pass is recorded there for a later backward sweep.
pub fn predict_noise(
    params: &DenoiserParams,
    x: &Grid,
    model_t: usize,
    c: Condition,
    tape: Option<&mut Tape>,
) -> Result<Grid> {
    let mut scratch = Tape::new();
    let tape = tape.unwrap_or(&mut scratch);
    let out = forward_on_tape(params, x, model_t, c, tape)?;
    let s = &params.spec;
    Grid::from_vec(s.image_channels, s.height, s.width, tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_spec() -> NetSpec {
        NetSpec {
            image_channels: 3,
            height: 6,
            width: 4,
            base_channels: 4,
            num_classes: 2,
            time_dim: 4,
        }
    }

    fn random_params(spec: NetSpec, seed: u64) -> DenoiserParams {
        let mut p = DenoiserParams::init(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let out = p.layer("conv_out").clone();
        for v in &mut p.values[out.offset..out.offset + out.len()] {
            *v = rng.gen_range(-0.3..0.3);
        }
        p
    }

    fn random_grid(spec: &NetSpec, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.image_channels * spec.height * spec.width;
        Grid::from_vec(
            spec.image_channels,
            spec.height,
            spec.width,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_network_size_is_desk_scale() {
        let p = DenoiserParams::zeros(NetSpec::default()).unwrap();
        assert!((10_000..=50_000).contains(&p.num_params()), "{}", p.num_params());
    }

    #[test]
    fn zero_params_predict_zero() {
        let spec = small_spec();
        let p = DenoiserParams::zeros(spec).unwrap();
        let out = predict_noise(&p, &random_grid(&spec, 1), 3, Condition { class_id: 1 }, None).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        let fresh = DenoiserParams::init(spec, 7).unwrap();
        let out = predict_noise(&fresh, &random_grid(&spec, 1), 3, Condition { class_id: 1 }, None).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = small_spec();
        let p = random_params(spec, 3);
        let x = random_grid(&spec, 2);
        let a = predict_noise(&p, &x, 5, Condition { class_id: 0 }, None).unwrap();
        let b = predict_noise(&p, &x, 5, Condition { class_id: 0 }, None).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = predict_noise(&p, &x, 5, Condition { class_id: 1 }, None).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = small_spec();
        let p = DenoiserParams::zeros(spec).unwrap();
        let x = Grid::zeros(3, 4, 4).unwrap();
        assert!(matches!(
            predict_noise(&p, &x, 0, Condition { class_id: 0 }, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let spec = small_spec();
        let p = random_params(spec, 11);
        let x = random_grid(&spec, 12);
        let weights = random_grid(&spec, 13);
        let c = Condition { class_id: 1 };
        let loss = |values: &[f64]| {
            let mut q = p.clone();
            q.values.copy_from_slice(values);
            let out = predict_noise(&q, &x, 4, c, None).unwrap();
            out.mul(&weights).unwrap().sum()
        };
        let mut tape = Tape::new();
        let out = forward_on_tape(&p, &x, 4, c, &mut tape).unwrap();
        let mut grads = vec![0.0; p.num_params()];
        tape.backward(out, weights.as_slice(), &mut grads).unwrap();

        let h = 1e-5;
        for k in 0..p.num_params() {
            let mut v = p.values.clone();
            v[k] += h;
            let up = loss(&v);
            v[k] -= 2.0 * h;
            let fd = (up - loss(&v)) / (2.0 * h);
            let denom = fd.abs().max(grads[k].abs()).max(1e-6);
            assert!((fd - grads[k]).abs() / denom < 1e-4, "param {k}: {fd} vs {}", grads[k]);
        }
    }

    #[test]
    fn sgd_examples() {
        let spec = small_spec();
        let mut p = DenoiserParams::zeros(spec).unwrap();
        p.values.fill(1.0);
        let before = p.values.clone();
        p.sgd_step(&SgdConfig { lr: 0.1, clip_norm: 1.0, momentum: 0.0 }).unwrap();
        assert_eq!(p.values, before);

        p.grads[0] = 1.0;
        p.sgd_step(&SgdConfig { lr: 0.1, clip_norm: 1e9, momentum: 0.0 }).unwrap();
        assert!((p.values[0] - 0.9).abs() < 1e-15);
        assert!(p.grads.iter().all(|&g| g == 0.0));

        // norm 10 clipped to 1: update norm is lr * 1
        let mut q = DenoiserParams::zeros(spec).unwrap();
        q.grads[0] = 6.0;
        q.grads[1] = 8.0;
        let norm = q.sgd_step(&SgdConfig { lr: 0.5, clip_norm: 1.0, momentum: 0.0 }).unwrap();
        assert_eq!(norm, 10.0);
        let update = (q.values[0].powi(2) + q.values[1].powi(2)).sqrt();
        assert!((update - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sgd_refuses_non_finite_grads() {
        let mut p = DenoiserParams::zeros(small_spec()).unwrap();
        p.grads[3] = f64::NAN;
        let before = p.values.clone();
        assert!(matches!(
            p.sgd_step(&SgdConfig::default()),
            Err(Error::Training(_))
        ));
        assert_eq!(p.values, before);
        let mut p = DenoiserParams::zeros(small_spec()).unwrap();
        assert!(p.sgd_step(&SgdConfig { lr: 0.0, ..Default::default() }).is_err());
    }
}
