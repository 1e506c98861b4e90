use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use prunenet_cli::{worker_threads, Pipeline, PipelineConfig, PipelineError, ReviewMode, RunOptions};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "prunenet", version, about = "Two-stage MNIST training with noisy-sample pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Cap dataset size and epochs for a quick end-to-end check.
    #[arg(long)]
    smoke: bool,
    /// Override the config's review mode.
    #[arg(long, value_enum)]
    review: Option<ReviewMode>,
    /// Treat undecided candidates as `remove` when the review is finalized.
    #[arg(long)]
    force_remove_undecided: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validate on the full training pool and record every prediction.
    Stage1(Common),
    /// Flag noisy images per fold and intersect them into removal candidates.
    Flag(Common),
    /// Serve the candidates for human keep/remove review until finalized.
    Review(Common),
    /// Write the cleaned pool.
    Prune(Common),
    /// Cross-validate on the cleaned pool.
    Stage2(Common),
    /// Summaries, galleries and class distributions for both stages.
    Report(Common),
    /// Every stage in order, resuming after the last completed one.
    RunAll(Common),
}

fn run(cli: Cli) -> Result<(), anyhow::Error> {
    let (command, common) = match cli.command {
        Command::Stage1(c) => ("stage1", c),
        Command::Flag(c) => ("flag", c),
        Command::Review(c) => ("review", c),
        Command::Prune(c) => ("prune", c),
        Command::Stage2(c) => ("stage2", c),
        Command::Report(c) => ("report", c),
        Command::RunAll(c) => ("run-all", c),
    };
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(mode) = common.review {
        config.review.mode = mode;
    }
    if common.force_remove_undecided {
        config.review.force_remove_undecided = true;
    }
    let options = RunOptions {
        smoke: common.smoke,
        threads: worker_threads(),
    };
    let pipeline = Pipeline::new(config, options);
    match command {
        "stage1" => pipeline.stage1().map(drop),
        "flag" => pipeline.flag().map(drop),
        "review" => pipeline.review().map(drop),
        "prune" => pipeline.prune().map(drop),
        "stage2" => pipeline.stage2().map(drop),
        "report" => pipeline.report().map(drop),
        _ => pipeline.run_all().map(drop),
    }
    .with_context(|| format!("`prunenet {command}` failed"))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<PipelineError>()
                .map(PipelineError::exit_code)
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}
