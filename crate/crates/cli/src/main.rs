use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use stace_cli::config::{Config, Negatives};
use stace_cli::{run_all, run_stage, CliError, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Train,
    Segment,
    Cluster,
    Cav,
    Score,
    Eval,
    Render,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NegativesArg {
    Whole,
    Segments,
}

/// Spatial-temporal concept discovery and importance scoring for video models.
#[derive(Debug, Parser)]
#[command(name = "stace", version)]
struct Args {
    /// Stage to run, or `all` for the whole pipeline.
    #[arg(value_enum)]
    command: Command,
    /// Workspace config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Number of test videos per class used for scoring (0 = all).
    #[arg(long)]
    score_k: Option<usize>,
    /// Negative samples for CAV training.
    #[arg(long, value_enum)]
    negatives: Option<NegativesArg>,
}

fn run(args: Args) -> Result<(), CliError> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(k) = args.score_k {
        cfg.score_k = k;
    }
    if let Some(n) = args.negatives {
        cfg.negatives = match n {
            NegativesArg::Whole => Negatives::Whole,
            NegativesArg::Segments => Negatives::Segments,
        };
    }
    let stage = match args.command {
        Command::All => return run_all(&cfg),
        Command::Synth => Stage::Synth,
        Command::Train => Stage::Train,
        Command::Segment => Stage::Segment,
        Command::Cluster => Stage::Cluster,
        Command::Cav => Stage::Cav,
        Command::Score => Stage::Score,
        Command::Eval => Stage::Eval,
        Command::Render => Stage::Render,
    };
    run_stage(stage, &cfg).map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
