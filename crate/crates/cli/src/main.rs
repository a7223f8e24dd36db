//! `bd3`: train, evaluate and sample block diffusion language models.

mod commands;
mod report;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bd3lm::Bd3Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bd3", version, about = "Block discrete denoising diffusion language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a config file, writing a run directory.
    Train(commands::train::TrainArgs),
    /// Estimate NELBO and perplexity of a checkpoint on a dataset.
    Eval(commands::eval::EvalArgs),
    /// Generate samples from a checkpoint.
    Sample(commands::sample::SampleArgs),
    /// Time attention, training steps and samplers.
    Benchmark(commands::bench::BenchArgs),
    /// Run the acceptance suite.
    Verify(commands::verify::VerifyArgs),
    /// Summarize the sample stats files in a directory.
    GenStats {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 2 for configuration problems, 3 for data problems, 4 for unreadable
/// checkpoints, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Bd3Error>() {
        Some(Bd3Error::Config(_)) => 2,
        Some(Bd3Error::Data(_)) => 3,
        Some(Bd3Error::Checkpoint(_)) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => commands::train::run(&a).map(|_| true),
        Command::Eval(a) => commands::eval::run(&a).map(|_| true),
        Command::Sample(a) => commands::sample::run(&a).map(|_| true),
        Command::Benchmark(a) => commands::bench::run(&a).map(|_| true),
        Command::Verify(a) => commands::verify::run(&a),
        Command::GenStats { dir, out } => commands::stats::run(&dir, out.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Bd3Error::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&Bd3Error::Data("x".into()).into()), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["bd3", "sample", "--ckpt", "a.ckpt", "--sampler", "ancestral:8", "--out", "o.txt"]).unwrap();
        assert!(matches!(cli.command, Command::Sample(_)));
    }
}
