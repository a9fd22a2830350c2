//! `slotdisc` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.
//! Log verbosity comes from `SLOTDISC_LOG` (env_logger syntax, default `info`).

mod commands;
mod manifest;
mod serve;
mod simulate;

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "slotdisc", version, about = "Active learning for new slot discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and filter candidate spans with weak labels.
    Extract(commands::ExtractArgs),
    /// Run oracle-mode active learning for a strategy/seed matrix.
    Simulate(simulate::SimulateArgs),
    /// Score a model checkpoint against a labeled dataset.
    Evaluate(commands::EvaluateArgs),
    /// Serve the human annotation loop over HTTP.
    Serve(serve::ServeArgs),
    /// Aggregate simulate curves into tables and plot data.
    Report(commands::ReportArgs),
    /// Convert BIO two-column text to the corpus format.
    Convert(commands::ConvertArgs),
    /// Write a synthetic corpus.
    Generate(commands::GenerateArgs),
    /// Dump per-span selection scores for a run checkpoint.
    ScoreDump(commands::ScoreDumpArgs),
}

/// Bad invocation detected after argument parsing; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} `{}` does not exist", path.display())).into());
    }
    Ok(())
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLOTDISC_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Extract(a) => commands::extract(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Serve(a) => serve::run(a),
        Command::Report(a) => commands::report(a),
        Command::Convert(a) => commands::convert(a),
        Command::Generate(a) => commands::generate(a),
        Command::ScoreDump(a) => commands::score_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
