//! Operator-facing CLI: dataset sampling, proxy training/evaluation, graph
//! rendering, appearance optimization, and report aggregation.
//!
//! Conventions:
//! - every command that writes artifacts takes `--out`; the resolved config
//!   is echoed into the output directory together with the hashes needed to
//!   reproduce the run
//! - concurrent invocations must target distinct output directories; a lock
//!   file enforces this
//! - exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure;
//!   failures also emit a machine-readable error record on stderr

mod commands;
mod plot;

use clap::{Parser, Subcommand};
use proxymat::ErrorKind;

#[derive(Parser)]
#[command(name = "proxymat", version, about = "Differentiable proxies for procedural material graphs")]
struct Cli {
    /// Override the run seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record (and insist on) bitwise-reproducible numerics. Evaluation is
    /// deterministic either way; the flag is stamped into artifacts.
    #[arg(long, global = true)]
    fixed_math: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a (θ, image) dataset for one generator.
    Sample(commands::SampleArgs),
    /// Train a differentiable proxy on a dataset.
    Train(commands::TrainArgs),
    /// Evaluate a trained proxy on a held-out dataset.
    Eval(commands::EvalArgs),
    /// Render a material graph to SVBRDF maps plus a beauty render.
    Render(commands::RenderArgs),
    /// Match a graph to a target image with the three-stage pipeline.
    Optimize(commands::OptimizeArgs),
    /// Aggregate optimization runs into tables and plots.
    Report(commands::ReportArgs),
    /// Dump generator schemas and the filter registry.
    Schema(commands::SchemaArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let global = commands::Global {
        seed: cli.seed,
        fixed_math: cli.fixed_math,
    };
    let result = match cli.command {
        Command::Sample(a) => commands::sample(a, &global),
        Command::Train(a) => commands::train(a, &global),
        Command::Eval(a) => commands::eval(a, &global),
        Command::Render(a) => commands::render(a, &global),
        Command::Optimize(a) => commands::optimize(a, &global),
        Command::Report(a) => commands::report(a, &global),
        Command::Schema(a) => commands::schema(a, &global),
    };
    if let Err(err) = result {
        let kind = err.kind();
        let record = serde_json::json!({
            "error": match kind {
                ErrorKind::Config => "config",
                ErrorKind::Data => "data",
                ErrorKind::Numeric => "numeric",
            },
            "message": err.to_string(),
        });
        eprintln!("{record}");
        std::process::exit(match kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        });
    }
}
