use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use light_core::engine::{self, TrainConfig};
use light_core::model::Mode;
use light_core::synthdata::write_dataset_split;
use light_core::{io, LightError, Result, SceneSpec};

#[derive(Parser)]
#[command(name = "light", version, about = "Building instance segmentation and height estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Datagen {
        /// Scene generator parameters (JSON); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Validation images, taken from the end; defaults to n/10.
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a single image and render overlays.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a complete training config with default or desk-scale values.
    InitConfig {
        #[arg(long, default_value = "joint+gcti")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Small model and 128 px images for CPU training.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time forward passes.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LightError::config("config", format!("cannot read {}: {e}", path.display())))
}

fn print_json<T: serde::Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => log::warn!("could not print report: {e}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { spec, n, val, out } => {
            let spec = match spec {
                Some(p) => serde_json::from_str::<SceneSpec>(&read_config_text(&p)?)
                    .map_err(|e| LightError::config("spec", e.to_string()))?,
                None => SceneSpec::default(),
            };
            let m = write_dataset_split(&spec, n, val.unwrap_or(n / 10), &out)?;
            println!("wrote {} train and {} val samples to {}", m.train.len(), m.val.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let mut cfg = TrainConfig::from_json(&read_config_text(&config)?)?;
            cfg.apply_env_seed()?;
            let s = engine::train(&cfg, &data, &out)?;
            println!(
                "{} seed {}: {} steps in {:.0}s, best epoch {}",
                s.mode, s.seed, s.steps, s.seconds, s.best_epoch
            );
            print_json(&s.final_metrics);
        }
        Command::Eval { ckpt, data, split, out } => {
            let report = engine::evaluate(&ckpt, &data, &split)?;
            if let Some(p) = out {
                io::write_json(&p, &report)?;
            }
            print_json(&report.metrics);
        }
        Command::Infer { ckpt, image, out } => {
            let r = engine::infer(&ckpt, &image, &out)?;
            if let Some(set) = &r.instances {
                println!("{} instances", set.len());
            }
            for f in &r.files {
                println!("{}", f.display());
            }
        }
        Command::InitConfig { mode, seed, desk, out } => {
            let cfg = if desk { TrainConfig::desk(mode, seed) } else { TrainConfig { mode, seed, ..TrainConfig::default() } };
            io::write_json(&out, &cfg)?;
        }
        Command::Bench { ckpt, n, out } => {
            let report = engine::bench(&ckpt, n)?;
            if let Some(p) = out {
                io::write_json(&p, &report)?;
            }
            print_json(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
