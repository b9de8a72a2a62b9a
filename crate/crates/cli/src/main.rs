//! `pxpo`: pretrain the toy denoiser, fine-tune it with per-pixel feedback,
//! evaluate checkpoints, or serve the interactive feedback loop.
//!
//! Every configuration key can be overridden with a flag of the same name,
//! e.g. `pxpo train --config run.ini --lr 3e-4 --epochs 10`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pxpo_core::harness::{
    build_provider, evaluate, resume_rl_training, run_pretraining, run_rl_training,
    write_loss_curve, TrainConfig,
};
use pxpo_core::net::DenoiserParams;
use pxpo_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pxpo", version, about = "Per-pixel policy optimisation for a toy diffusion model")]
struct Cli {
    /// Configuration file (`[section]` + `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from a named preset: channel_penalty, segmenter, painter, human.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoiser on the procedural scene corpus.
    Pretrain,
    /// Fine-tune a pretrained checkpoint (`--checkpoint`) with feedback.
    Train {
        /// Continue from the last epoch in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score seeded samples of a checkpoint (`--checkpoint`, `--feedback`).
    Evaluate {
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Write every sample as a PXG1 frame here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Serve the human feedback loop over HTTP (`--port`).
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Print the effective configuration.
    ShowConfig,
}

/// Pulls `--key value` / `--key=value` pairs naming configuration keys out of
/// the argument list; everything else is left for clap.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let keys: Vec<&'static str> = TrainConfig::default().entries().iter().map(|e| e.1).collect();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if !keys.contains(&key.as_str()) {
            rest.push(arg);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(value) => overrides.push((key, value)),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = match &cli.preset {
        Some(name) => TrainConfig::preset(name)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint(cfg: &TrainConfig) -> Result<DenoiserParams> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    DenoiserParams::load_checkpoint(path)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let cfg = load_config(&cli, &overrides)?;
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_text()),
        Command::Pretrain => {
            let out = cfg.resolved_output_dir();
            std::fs::create_dir_all(&out)?;
            let (params, report) = run_pretraining(&cfg)?;
            params.save_checkpoint(out.join("pretrained.ckpt"))?;
            write_loss_curve(&out.join("pretrain_loss.csv"), &report)?;
            std::fs::write(out.join("config.ini"), cfg.to_text())?;
            println!("final loss {:.5} over the last window", report.final_loss);
            if !report.below_threshold {
                log::warn!(
                    "final loss {:.5} is above the threshold {}",
                    report.final_loss,
                    cfg.pretrain_loss_threshold
                );
            }
            println!("wrote {}", out.join("pretrained.ckpt").display());
        }
        Command::Train { resume } => {
            let mut provider = build_provider(&cfg)?;
            let report = if resume {
                resume_rl_training(&cfg, provider.as_mut())?
            } else {
                run_rl_training(&cfg, provider.as_mut())?
            };
            for r in &report.records {
                println!(
                    "epoch {:3}  mean reward {:+.5}  std {:.5}  grad norm {:.3}",
                    r.epoch, r.mean_reward, r.reward_std, r.grad_norm
                );
            }
            if let Some(dir) = report.output_dir {
                println!("wrote {}", dir.display());
            }
        }
        Command::Evaluate { n, dump } => {
            let params = checkpoint(&cfg)?;
            let spec = cfg.feedback_spec()?;
            let m = evaluate(&params, &cfg, &spec, n, dump.as_deref())?;
            println!("{}: {:.5} +- {:.5} over {n} samples", spec.name(), m.mean, m.std);
        }
        Command::Serve { host } => {
            let params = checkpoint(&cfg)?;
            let addr: SocketAddr = format!("{host}:{}", cfg.port)
                .parse()
                .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
            let service = pxpo_service::ServiceConfig {
                run_root: Some(cfg.resolved_output_dir()),
                train: cfg,
                params,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(pxpo_service::serve(service, addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                ref e if e.is_numeric() => 3,
                _ => 1,
            })
        }
    }
}
