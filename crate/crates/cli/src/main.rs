//! `promptstab` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 backend failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptstab_core::backend::BackendError;

#[derive(Parser)]
#[command(name = "promptstab", version, about = "Prompt sensitivity, calibration and stability-aware prompt optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate K placeholder-preserving paraphrases of a prompt.
    Paraphrase(commands::ParaphraseArgs),
    /// Evaluate a prompt and its paraphrases; writes summary.json.
    Eval(commands::EvalArgs),
    /// Split conformal prediction sets over an eval summary; writes conformal.json.
    Conformal(commands::ConformalArgs),
    /// Stable vs unstable stratification; writes analysis.json and CSVs.
    Analyze(commands::AnalyzeArgs),
    /// Run the prompt optimizer into a run directory.
    Optimize(commands::OptimizeArgs),
    /// Accuracy-only vs joint optimization over several seeds.
    Sweep(commands::SweepArgs),
    /// Merge artifacts of earlier commands into report.json and CSVs.
    Report(commands::ReportArgs),
    /// Write a synthetic task, dataset and starter prompt.
    Synth(commands::SynthArgs),
}

fn is_backend_failure(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<BackendError>()
            .is_some_and(|b| !matches!(b, BackendError::Config(_)))
            || matches!(
                c.downcast_ref::<promptstab_core::Error>(),
                Some(promptstab_core::Error::Backend(b)) if !matches!(b, BackendError::Config(_))
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Paraphrase(a) => commands::paraphrase(a),
        Command::Eval(a) => commands::eval(a),
        Command::Conformal(a) => commands::conformal(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Sweep(a) => match commands::sweep(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: every sweep run failed; see sweep.csv");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_backend_failure(&e) { 2 } else { 1 })
        }
    }
}
