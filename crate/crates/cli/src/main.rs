mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uls_dram::pipeline::Precision;

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "ulsdram", version, about = "Multi-modal attribute value extraction on synthetic product data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Flags {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; also the only ablation seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "ULSDRAM_OUT", default_value = "runs")]
    out: PathBuf,
    /// Variant name; a comma-separated list for `ablate`.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Comma-separated thresholds for `sweep-thr`.
    #[arg(long, global = true, value_delimiter = ',')]
    thr_grid: Option<Vec<f64>>,
    /// Arithmetic mode for training: `single` or `double`.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus as JSONL.
    Generate {
        /// Store raw pixels instead of generator references.
        #[arg(long)]
        embed_images: bool,
    },
    /// Train one variant and save a checkpoint.
    Train,
    /// Score a checkpoint on one split.
    Eval {
        /// Defaults to `checkpoint.bin` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and score every configured variant and seed.
    Ablate,
    /// Score one model across a grid of range thresholds.
    SweepThr {
        /// Reuse a trained checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write fusion attention maps as CSV matrices.
    ExportAttention {
        /// Defaults to `checkpoint.bin` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        _ => Err(format!("expected single or double, got {s:?}")),
    }
}

fn resolve(flags: &Flags, ablate: bool) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(flags.config.as_deref())?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
        cfg.ablation.seeds = vec![seed];
    }
    if let Some(v) = &flags.variant {
        if ablate {
            cfg.ablation.variants = v.split(',').map(|s| s.trim().to_string()).collect();
        } else {
            cfg.variant = v.clone();
        }
    }
    if let Some(grid) = &flags.thr_grid {
        cfg.sweep.thresholds = grid.clone();
    }
    if let Some(p) = flags.precision {
        cfg.train.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.flags, matches!(cli.command, Command::Ablate))?;
    let out = &cli.flags.out;
    std::fs::create_dir_all(out)?;
    commands::write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    match cli.command {
        Command::Generate { embed_images } => commands::generate(&cfg, out, embed_images),
        Command::Train => commands::train(&cfg, out),
        Command::Eval { checkpoint, split } => commands::eval(&cfg, out, checkpoint, &split),
        Command::Ablate => commands::ablate(&cfg, out),
        Command::SweepThr { checkpoint } => commands::sweep_thr(&cfg, out, checkpoint),
        Command::ExportAttention { checkpoint } => commands::export_attention(&cfg, out, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
