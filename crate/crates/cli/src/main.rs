use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use danube::config::RunConfig;
use danube::run::{inspect, run_stage, Stage};
use danube::Error;

/// Train, align, evaluate and sample a small decoder-only language model.
#[derive(Parser)]
#[command(name = "danube", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train from scratch over the configured curriculum.
    Pretrain(RunArgs),
    /// Chat fine-tuning with the prompt loss masked.
    Sft(RunArgs),
    /// Preference optimization through LoRA adapters.
    Dpo(RunArgs),
    /// Move a checkpoint to a new tokenizer.
    Remap(RunArgs),
    /// Multiple-choice, exact-match and perplexity evaluation.
    Eval(RunArgs),
    /// Sample a continuation of the configured prompt.
    Generate(RunArgs),
    /// Print a checkpoint's config and tensor table.
    Inspect { checkpoint: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (stage, args) = match cli.command {
        Command::Inspect { checkpoint } => {
            let report = inspect(&checkpoint)
                .with_context(|| format!("inspecting {}", checkpoint.display()))?;
            print!("{report}");
            return Ok(());
        }
        Command::Pretrain(a) => (Stage::Pretrain, a),
        Command::Sft(a) => (Stage::Sft, a),
        Command::Dpo(a) => (Stage::Dpo, a),
        Command::Remap(a) => (Stage::Remap, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Generate(a) => (Stage::Generate, a),
    };
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = run_stage(&cfg, stage)?;
    println!(
        "{} finished; outputs in {}",
        stage.dir_name(),
        dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Error::RunConfig(list)) = e.downcast_ref::<Error>() {
                eprintln!("invalid configuration ({} problem(s)):", list.len());
                for item in list {
                    eprintln!("  - {item}");
                }
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
