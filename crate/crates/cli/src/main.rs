//! `twig`: generation, self-speculative decoding, pruning arithmetic, twig
//! training, benchmarks, and attention export over JSON/CSV, all seeded.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Failures print a machine-readable JSON object to stdout.

mod commands;
mod spec;

use clap::{Parser, Subcommand};
use serde_json::json;

use twig_core::Error;

#[derive(Parser)]
#[command(name = "twig", version, about = "Twig-accelerated transformer runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy or attention-pruned generation.
    Gen(commands::GenArgs),
    /// Self-speculative decoding with the twig as draft model.
    Ssd(commands::SsdArgs),
    /// Solve the retained-token count for a target layer average.
    PruneSolve(commands::PruneSolveArgs),
    /// Train the twig block on a synthetic copy task.
    Train(commands::TrainArgs),
    /// Timing / acceptance-rate / FLOP sweep over response lengths.
    Bench(commands::BenchArgs),
    /// Export aggregated visual attention scores as CSV.
    ExportAttn(commands::ExportAttnArgs),
    /// Closed-form prefill FLOP report.
    Flops(commands::FlopsArgs),
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Domain(_) => 2,
        _ => 1,
    }
}

fn kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Input(_) => "input",
        Error::Domain(_) => "domain",
        Error::Internal(_) => "internal",
        Error::Training(_) => "training",
        Error::Measurement(_) => "measurement",
        Error::Io(_) => "io",
        Error::Format(_) => "format",
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => commands::run_gen(args),
        Command::Ssd(args) => commands::run_ssd(args),
        Command::PruneSolve(args) => commands::run_prune_solve(args),
        Command::Train(args) => commands::run_train(args),
        Command::Bench(args) => commands::run_bench(args),
        Command::ExportAttn(args) => commands::run_export_attn(args),
        Command::Flops(args) => commands::run_flops(args),
    };
    if let Err(err) = result {
        let code = exit_code(&err);
        let payload = json!({
            "error": { "kind": kind(&err), "message": err.to_string(), "exit": code }
        });
        println!("{payload}");
        std::process::exit(code);
    }
}
