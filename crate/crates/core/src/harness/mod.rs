//! Configuration, pretraining and fine-tuning runs, evaluation, and the
//! interactive feedback session driven by the HTTP service.

mod config;
mod evaluate;
mod painter;
mod session;
mod train;

pub use config::{FeedbackKind, Mode, TrainConfig, OUTPUT_ROOT_ENV};
pub use evaluate::{evaluate, EvalMetrics};
pub use painter::{water_area, ScriptedPainter};
pub use session::{Session, SessionState};
pub use train::{
    derive_seed, resume_rl_training, reward_summary, run_pretraining, run_rl_training,
    sample_images, train_in_memory, write_loss_curve, EpochRecord, RunDir, RunReport, Rollouts,
    Trainer,
};

use crate::error::Result;
use crate::rewards::FeedbackProvider;

/// The feedback provider a configuration asks for.
pub fn build_provider(cfg: &TrainConfig) -> Result<Box<dyn FeedbackProvider + Send>> {
    Ok(match cfg.feedback {
        FeedbackKind::Painter => Box::new(ScriptedPainter { invert: false }),
        FeedbackKind::PainterInverse => Box::new(ScriptedPainter { invert: true }),
        _ => Box::new(cfg.feedback_spec()?),
    })
}
