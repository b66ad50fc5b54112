use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod eval_cmd;
mod models;
mod output;
mod refine_cmd;
mod serve_cmd;
mod synth_cmd;
mod theory_cmd;

/// Multi-step refinement for one-step audio separators.
#[derive(Debug, Parser)]
#[command(name = "stepsep", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Refine a mixture (or a directory of problems) and write estimates,
    /// traces and a checkpoint summary.
    Refine(refine_cmd::RefineArgs),
    /// Score estimates against references; prints JSON.
    Eval(eval_cmd::EvalArgs),
    /// Run a numerical property suite; exits 1 if a property fails.
    Theory(theory_cmd::TheoryArgs),
    /// Write a seeded synthetic corpus with a manifest.
    Synth(synth_cmd::SynthArgs),
    /// Serve a trivial model over stdin/stdout (protocol reference).
    ServeModel(serve_cmd::ServeArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Refine(a) => refine_cmd::run(a),
        Command::Eval(a) => eval_cmd::run(a),
        Command::Theory(a) => theory_cmd::run(a),
        Command::Synth(a) => synth_cmd::run(a),
        Command::ServeModel(a) => serve_cmd::run(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
