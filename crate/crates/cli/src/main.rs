use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpc_cli::{
    cmd_adapt, cmd_correct, cmd_flow, cmd_metrics, cmd_pipeline, cmd_synth, cmd_trajectory, CliError, PipelineConfig,
    Run,
};

#[derive(Parser)]
#[command(name = "vpc", version, about = "Wide-angle portrait video correction pipeline")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render and jitter a synthetic distorted sequence.
    Synth,
    /// Estimate (or copy) inter-frame flows.
    Flow,
    /// Sample per-frame pseudo-label correction flows and warp the frames.
    Correct,
    /// Write the pseudo-label correction trajectory.
    Trajectory,
    /// Smooth the correction flows over time.
    Adapt,
    /// Score geometry and stability.
    Metrics,
    /// All of the above, plus summary and manifest.
    Pipeline,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = PipelineConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let dir = cli.out.unwrap_or_else(|| config.output.dir.clone());
    let run = Run::new(config, dir)?;
    match cli.command {
        Command::Synth => cmd_synth(&run),
        Command::Flow => cmd_flow(&run),
        Command::Correct => cmd_correct(&run),
        Command::Trajectory => cmd_trajectory(&run),
        Command::Adapt => cmd_adapt(&run),
        Command::Metrics => cmd_metrics(&run).map(|_| ()),
        Command::Pipeline => cmd_pipeline(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vpc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
