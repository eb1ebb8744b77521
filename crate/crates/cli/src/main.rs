use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use panosplat_cli::{run_pipeline, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "panosplat", version, about = "Panorama to Gaussian splatting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated stages to run instead of the subcommand's default.
    #[arg(long, global = true, value_delimiter = ',', num_args = 0..)]
    stages: Option<Vec<String>>,
    /// Re-run stages even when their manifest is current.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `--set train.iterations=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Refine,
    Slide,
    Init,
    Train,
    Render,
    Metrics,
    /// Every stage whose inputs are configured.
    All,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.output_dir = out;
    }
    let stages = match cli.stages {
        Some(list) => list
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Stage>())
            .collect::<Result<Vec<_>, _>>()?,
        None => match cli.command {
            Command::Refine => vec![Stage::Refine],
            Command::Slide => vec![Stage::Slide],
            Command::Init => vec![Stage::Init],
            Command::Train => vec![Stage::Train],
            Command::Render => vec![Stage::Render],
            Command::Metrics => vec![Stage::Metrics],
            Command::All => Stage::default_chain(&cfg),
        },
    };
    for (stage, status) in run_pipeline(&cfg, &stages, cli.force)? {
        eprintln!("{:<8} {status}", stage.name());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
