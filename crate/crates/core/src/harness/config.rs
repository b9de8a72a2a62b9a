//! Run configuration: `[section]` headers and `key = value` lines, `#`
//! comments. Key names are unique across sections, so any key can also be
//! overridden on its own (`--lr 3e-4` on the command line).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::net::{NetSpec, SgdConfig};
use crate::rewards::{FeedbackSpec, SegmenterConfig};
use crate::datasets::PretrainConfig;

/// Environment variable that relative output directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "PXPO_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pxpo,
    Ddpo,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pxpo" => Ok(Mode::Pxpo),
            "ddpo" => Ok(Mode::Ddpo),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected pxpo or ddpo)"))),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pxpo => "pxpo",
            Mode::Ddpo => "ddpo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackKind {
    Zero,
    ChannelPenalty,
    ToySegmenter,
    HumanMask,
    /// Scripted stand-in for a person: marks disks negative, trees positive.
    Painter,
    /// The opposite painter: disks positive, trees negative.
    PainterInverse,
}

impl FromStr for FeedbackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "zero" => FeedbackKind::Zero,
            "channel_penalty" => FeedbackKind::ChannelPenalty,
            "toy_segmenter" => FeedbackKind::ToySegmenter,
            "human_mask" => FeedbackKind::HumanMask,
            "painter" => FeedbackKind::Painter,
            "painter_inverse" => FeedbackKind::PainterInverse,
            _ => return Err(Error::Config(format!("unknown feedback kind {s:?}"))),
        })
    }
}

impl FeedbackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackKind::Zero => "zero",
            FeedbackKind::ChannelPenalty => "channel_penalty",
            FeedbackKind::ToySegmenter => "toy_segmenter",
            FeedbackKind::HumanMask => "human_mask",
            FeedbackKind::Painter => "painter",
            FeedbackKind::PainterInverse => "painter_inverse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // [model]
    pub image_height: usize,
    pub image_width: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    pub num_classes: usize,
    pub latent_factor: usize,
    pub init_seed: u64,
    // [schedule]
    pub train_steps: usize,
    pub rollout_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    // [optimizer]
    pub lr: f64,
    pub clip_norm: f64,
    pub momentum: f64,
    pub grad_scale: f64,
    // [pretrain]
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    pub pretrain_clip: f64,
    pub pretrain_loss_threshold: f64,
    // [run]
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub class_id: usize,
    pub seed: u64,
    pub standardize: bool,
    pub fixed_noise: bool,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub save_samples: bool,
    // [feedback]
    pub feedback: FeedbackKind,
    pub penalty_channel: usize,
    pub penalty_gain: f64,
    pub seg_affinity_gain: f64,
    pub seg_template_radius: f64,
    pub seg_threshold: f64,
    pub seg_softness: f64,
    pub seg_spread_radius: f64,
    pub mask_file: Option<PathBuf>,
    // [service]
    pub port: u16,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let seg = SegmenterConfig::default();
        let pre = PretrainConfig::default();
        Self {
            image_height: 24,
            image_width: 24,
            base_channels: 32,
            time_dim: 16,
            num_classes: 3,
            latent_factor: 1,
            init_seed: 0,
            train_steps: 50,
            rollout_steps: 20,
            beta_min: 0.002,
            beta_max: 0.2,
            sigma_min: 0.05,
            lr: 1e-4,
            clip_norm: 1.0,
            momentum: 0.0,
            grad_scale: 1.0,
            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch_size,
            pretrain_lr: pre.optimizer.lr,
            pretrain_momentum: pre.optimizer.momentum,
            pretrain_clip: pre.optimizer.clip_norm,
            pretrain_loss_threshold: pre.loss_threshold,
            mode: Mode::Pxpo,
            epochs: 30,
            batch_size: 64,
            class_id: 0,
            seed: 0,
            standardize: false,
            fixed_noise: false,
            output_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            save_samples: true,
            feedback: FeedbackKind::ChannelPenalty,
            penalty_channel: 2,
            penalty_gain: 1.0,
            seg_affinity_gain: seg.affinity_gain,
            seg_template_radius: seg.template_radius,
            seg_threshold: seg.threshold,
            seg_softness: seg.softness,
            seg_spread_radius: seg.spread_radius,
            mask_file: None,
            port: 8080,
        }
    }
}

const SECTIONS: [&str; 7] = ["model", "schedule", "optimizer", "pretrain", "run", "feedback", "service"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// `(section, key, value)` for every setting, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        vec![
            ("model", "image_height", self.image_height.to_string()),
            ("model", "image_width", self.image_width.to_string()),
            ("model", "base_channels", self.base_channels.to_string()),
            ("model", "time_dim", self.time_dim.to_string()),
            ("model", "num_classes", self.num_classes.to_string()),
            ("model", "latent_factor", self.latent_factor.to_string()),
            ("model", "init_seed", self.init_seed.to_string()),
            ("schedule", "train_steps", self.train_steps.to_string()),
            ("schedule", "rollout_steps", self.rollout_steps.to_string()),
            ("schedule", "beta_min", format!("{:?}", self.beta_min)),
            ("schedule", "beta_max", format!("{:?}", self.beta_max)),
            ("schedule", "sigma_min", format!("{:?}", self.sigma_min)),
            ("optimizer", "lr", format!("{:?}", self.lr)),
            ("optimizer", "clip_norm", format!("{:?}", self.clip_norm)),
            ("optimizer", "momentum", format!("{:?}", self.momentum)),
            ("optimizer", "grad_scale", format!("{:?}", self.grad_scale)),
            ("pretrain", "pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain", "pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain", "pretrain_lr", format!("{:?}", self.pretrain_lr)),
            ("pretrain", "pretrain_momentum", format!("{:?}", self.pretrain_momentum)),
            ("pretrain", "pretrain_clip", format!("{:?}", self.pretrain_clip)),
            ("pretrain", "pretrain_loss_threshold", format!("{:?}", self.pretrain_loss_threshold)),
            ("run", "mode", self.mode.as_str().to_string()),
            ("run", "epochs", self.epochs.to_string()),
            ("run", "batch_size", self.batch_size.to_string()),
            ("run", "class_id", self.class_id.to_string()),
            ("run", "seed", self.seed.to_string()),
            ("run", "standardize", self.standardize.to_string()),
            ("run", "fixed_noise", self.fixed_noise.to_string()),
            ("run", "output_dir", self.output_dir.display().to_string()),
            ("run", "checkpoint", show_path(&self.checkpoint)),
            ("run", "save_samples", self.save_samples.to_string()),
            ("feedback", "feedback", self.feedback.as_str().to_string()),
            ("feedback", "penalty_channel", self.penalty_channel.to_string()),
            ("feedback", "penalty_gain", format!("{:?}", self.penalty_gain)),
            ("feedback", "seg_affinity_gain", format!("{:?}", self.seg_affinity_gain)),
            ("feedback", "seg_template_radius", format!("{:?}", self.seg_template_radius)),
            ("feedback", "seg_threshold", format!("{:?}", self.seg_threshold)),
            ("feedback", "seg_softness", format!("{:?}", self.seg_softness)),
            ("feedback", "seg_spread_radius", format!("{:?}", self.seg_spread_radius)),
            ("feedback", "mask_file", show_path(&self.mask_file)),
            ("service", "port", self.port.to_string()),
        ]
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "image_height" => self.image_height = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "time_dim" => self.time_dim = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "latent_factor" => self.latent_factor = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "rollout_steps" => self.rollout_steps = parse(key, v)?,
            "beta_min" => self.beta_min = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "sigma_min" => self.sigma_min = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "grad_scale" => self.grad_scale = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_momentum" => self.pretrain_momentum = parse(key, v)?,
            "pretrain_clip" => self.pretrain_clip = parse(key, v)?,
            "pretrain_loss_threshold" => self.pretrain_loss_threshold = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "class_id" => self.class_id = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "standardize" => self.standardize = parse_bool(key, v)?,
            "fixed_noise" => self.fixed_noise = parse_bool(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = optional_path(v),
            "save_samples" => self.save_samples = parse_bool(key, v)?,
            "feedback" => self.feedback = v.parse()?,
            "penalty_channel" => self.penalty_channel = parse(key, v)?,
            "penalty_gain" => self.penalty_gain = parse(key, v)?,
            "seg_affinity_gain" => self.seg_affinity_gain = parse(key, v)?,
            "seg_template_radius" => self.seg_template_radius = parse(key, v)?,
            "seg_threshold" => self.seg_threshold = parse(key, v)?,
            "seg_softness" => self.seg_softness = parse(key, v)?,
            "seg_spread_radius" => self.seg_spread_radius = parse(key, v)?,
            "mask_file" => self.mask_file = optional_path(v),
            "port" => self.port = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let sections: Vec<(&str, &str)> = self.entries().iter().map(|(s, k, _)| (*s, *k)).collect();
        let mut section: Option<String> = None;
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let home = sections
                .iter()
                .find(|(_, k)| *k == key)
                .map(|(s, _)| *s)
                .ok_or_else(|| at(format!("unknown key {key:?}")))?;
            if let Some(s) = &section {
                if s != home {
                    return Err(at(format!("key {key:?} belongs in [{home}], not [{s}]")));
                }
            }
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key {key:?}")));
            }
            self.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Named experiment settings.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            // Dense penalty on the blue channel, large batches.
            "channel_penalty" => {
                cfg.feedback = FeedbackKind::ChannelPenalty;
                cfg.class_id = crate::datasets::FOREST;
                cfg.batch_size = 64;
                cfg.epochs = 30;
                cfg.lr = 2e-3;
                cfg.output_dir = PathBuf::from("runs/channel_penalty");
            }
            // Sparse, confidence-weighted negative feedback from the detector.
            "segmenter" => {
                cfg.feedback = FeedbackKind::ToySegmenter;
                cfg.class_id = crate::datasets::LAKE;
                cfg.batch_size = 10;
                cfg.epochs = 16;
                cfg.standardize = true;
                cfg.lr = 1e-3;
                cfg.output_dir = PathBuf::from("runs/segmenter");
            }
            // One image per epoch, painted by hand (or by the scripted painter).
            "painter" | "human" => {
                cfg.feedback = if name == "painter" { FeedbackKind::Painter } else { FeedbackKind::HumanMask };
                cfg.class_id = crate::datasets::LANDSCAPE;
                cfg.batch_size = 1;
                cfg.epochs = 15;
                cfg.fixed_noise = true;
                cfg.lr = 2e-3;
                cfg.output_dir = PathBuf::from(format!("runs/{name}"));
            }
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_factor == 0
            || !self.image_height.is_multiple_of(self.latent_factor)
            || !self.image_width.is_multiple_of(self.latent_factor)
        {
            return bad(format!(
                "latent_factor {} must divide the image size {}x{}",
                self.latent_factor, self.image_height, self.image_width
            ));
        }
        self.net_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.train_steps == 0 || self.rollout_steps == 0 || self.rollout_steps > self.train_steps {
            return bad(format!(
                "need 0 < rollout_steps ({}) <= train_steps ({})",
                self.rollout_steps, self.train_steps
            ));
        }
        if self.batch_size == 0 || self.pretrain_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.class_id >= self.num_classes {
            return bad(format!("class_id {} out of range", self.class_id));
        }
        let positive = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("grad_scale", self.grad_scale),
            ("pretrain_lr", self.pretrain_lr),
            ("pretrain_clip", self.pretrain_clip),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in [("momentum", self.momentum), ("pretrain_momentum", self.pretrain_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        self.schedule()?;
        if !matches!(
            self.feedback,
            FeedbackKind::HumanMask | FeedbackKind::Painter | FeedbackKind::PainterInverse
        ) {
            self.feedback_spec()?.validate()?;
        }
        if let Some(p) = &self.checkpoint {
            if !p.is_file() {
                return bad(format!("checkpoint {} does not exist", p.display()));
            }
        }
        if self.feedback == FeedbackKind::HumanMask {
            if let Some(p) = &self.mask_file {
                if !p.is_file() {
                    return bad(format!("mask file {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }

    pub fn model_height(&self) -> usize {
        self.image_height / self.latent_factor.max(1)
    }

    pub fn model_width(&self) -> usize {
        self.image_width / self.latent_factor.max(1)
    }

    pub fn net_spec(&self) -> NetSpec {
        NetSpec {
            image_channels: 3,
            height: self.model_height(),
            width: self.model_width(),
            base_channels: self.base_channels,
            num_classes: self.num_classes,
            time_dim: self.time_dim,
        }
    }

    /// The schedule the denoiser is trained on.
    pub fn training_schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.train_steps, self.beta_min, self.beta_max)
    }

    /// The respaced schedule used for rollouts, with the RL variance floor.
    pub fn schedule(&self) -> Result<Schedule> {
        self.training_schedule()?
            .respace(self.rollout_steps)?
            .with_sigma_min(self.sigma_min)
    }

    pub fn optimizer(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            momentum: self.momentum,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            optimizer: SgdConfig {
                lr: self.pretrain_lr,
                clip_norm: self.pretrain_clip,
                momentum: self.pretrain_momentum,
            },
            seed: self.init_seed,
            loss_threshold: self.pretrain_loss_threshold,
            ..PretrainConfig::default()
        }
    }

    pub fn segmenter(&self) -> SegmenterConfig {
        SegmenterConfig {
            affinity_gain: self.seg_affinity_gain,
            template_radius: self.seg_template_radius,
            threshold: self.seg_threshold,
            softness: self.seg_softness,
            spread_radius: self.seg_spread_radius,
        }
    }

    /// The feedback function for non-interactive kinds. Human masks are read
    /// from `mask_file` (a PGM using the wire coding).
    pub fn feedback_spec(&self) -> Result<FeedbackSpec> {
        Ok(match self.feedback {
            FeedbackKind::Zero => FeedbackSpec::Zero,
            FeedbackKind::ChannelPenalty => FeedbackSpec::ChannelPenalty {
                channel: self.penalty_channel,
                gain: self.penalty_gain,
            },
            FeedbackKind::ToySegmenter => FeedbackSpec::ToySegmenter(self.segmenter()),
            FeedbackKind::HumanMask => {
                let path = self
                    .mask_file
                    .as_ref()
                    .ok_or_else(|| Error::Config("human_mask feedback needs mask_file".into()))?;
                let map = crate::rewards::decode_mask_pgm(&std::fs::read(path)?)?;
                FeedbackSpec::HumanMask {
                    payload: crate::rewards::encode_human_mask(&map)?,
                    height: map.height(),
                    width: map.width(),
                }
            }
            FeedbackKind::Painter | FeedbackKind::PainterInverse => {
                return Err(Error::Config("the scripted painter is not a fixed feedback spec".into()))
            }
        })
    }

    /// `output_dir`, resolved against `$PXPO_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}
