use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csg_core::experiment::{commands, ExperimentConfig, SweepAxis};
use csg_core::CsgError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "csg", version, about = "Contrastive synthetic-to-real training on the toy shapes benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; unspecified fields take task defaults.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on the real-proxy domain.
    Pretrain(Common),
    /// Train a student on the synthetic domain against a teacher.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `teacher_checkpoint`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Accuracy or mIoU of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// synthetic-test | realproxy-test | synthetic-train | realproxy-train
        #[arg(long, default_value = "realproxy-test")]
        split: String,
    },
    /// Hyperspherical energies and density of a checkpoint's features.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "realproxy-test")]
        split: String,
    },
    /// One training per value of an axis, plus the baseline row.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// m | g | pooling | lambda
        #[arg(long)]
        axis: String,
        /// Comma-separated; layer sets are written `3+4`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load(common: &Common) -> csg_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn print<T: serde::Serialize>(value: &T) -> csg_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> csg_core::Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = load(&common)?;
            let ckpt = commands::cmd_pretrain(&cfg)?;
            println!("{}", ckpt.display());
        }
        Command::Train { common, teacher } => {
            let mut cfg = load(&common)?;
            if teacher.is_some() {
                cfg.teacher_checkpoint = teacher;
            }
            print(&commands::cmd_train(&cfg)?)?;
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint"));
            print(&commands::cmd_eval(&cfg, &ckpt, &split)?)?;
        }
        Command::Diagnose { common, checkpoint, split } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint"));
            let report = commands::cmd_diagnose(&cfg, &ckpt, &split)?;
            // The full grid is in the written CSV; keep stdout readable.
            let mut summary = serde_json::to_value(&report)?;
            if let Some(kde) = summary.get_mut("kde").and_then(|k| k.as_object_mut()) {
                kde.remove("density");
            }
            print(&summary)?;
        }
        Command::Sweep { common, teacher, axis, values } => {
            let mut cfg = load(&common)?;
            if teacher.is_some() {
                cfg.teacher_checkpoint = teacher;
            }
            let axis: SweepAxis = axis.parse()?;
            let rows = commands::cmd_sweep(&cfg, axis, &values)?;
            print!("{}", csg_core::experiment::sweep_csv(&rows));
        }
    }
    Ok(())
}

fn exit_code(e: &CsgError) -> u8 {
    match e {
        CsgError::Config(_) => 2,
        CsgError::NumericDomain(_) | CsgError::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
