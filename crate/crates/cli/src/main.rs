mod args;
mod commands;
mod setup;

use std::process::ExitCode;

use clap::Parser;
use duat_core::pipeline::Ablation;

use args::{Cli, Command};
use commands::Status;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Translate(run) => commands::translate(run, Ablation::default(), "translate"),
        Command::Ablate { run, without_draft, without_iqc } => {
            commands::translate(run, Ablation { without_draft, without_iqc }, "ablate")
        }
        Command::SweepTau { run, grid } => commands::sweep_tau(run, grid),
        Command::SynthDemos { run, max_pairs, min_reference_qe, sets_out } => {
            commands::synth_demos(run, max_pairs, min_reference_qe, sets_out)
        }
        Command::Rerank { run, runs } => commands::rerank(run, runs),
        Command::BuildBench(bench) => commands::build_bench(bench),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
