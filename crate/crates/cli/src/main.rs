use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod sidecar;

/// Detect objects, benchmark latency and pick configurations for a budget.
#[derive(Debug, Parser)]
#[command(name = "edgedet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: config::Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the detector on images and write COCO-format results.
    Detect,
    /// Time one configuration with a per-stage breakdown.
    Bench,
    /// Time every model and input size combination.
    Sweep,
    /// Compare a tiled batch against one large input.
    TileBench,
    /// Pick the most accurate sweep row within a latency budget.
    Select,
    /// Score detections against COCO annotations.
    Eval,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = || -> anyhow::Result<()> {
        let cfg = cli.flags.resolve()?;
        match cli.command {
            Command::Detect => commands::detect(&cfg),
            Command::Bench => commands::bench(&cfg),
            Command::Sweep => commands::sweep(&cfg),
            Command::TileBench => commands::tile_bench(&cfg),
            Command::Select => commands::select(&cfg),
            Command::Eval => commands::eval(&cfg),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
