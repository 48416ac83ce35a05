//! `dacnet`: train, analyze, and construct DAC networks from the command
//! line.
//!
//! Exit codes are a stable contract: 0 success (criterion met where one
//! exists), 2 usage error, 3 criterion unmet, 4 runtime failure.

mod commands;

use clap::{Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CRITERION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Parser)]
#[command(name = "dacnet", version, about = "DAC network toolkit")]
struct Cli {
    /// Cap worker parallelism for batch evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed; falls back to the DACNET_SEED environment variable, then 1.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset and emit history, model, and summary files.
    Train(commands::train::TrainArgs),
    /// Build a DAC approximant of a target function to a sup-error budget.
    Approx(commands::approx::ApproxArgs),
    /// FLOPs and weight report for a model.
    Flops(commands::flops::FlopsArgs),
    /// Verify the standard <-> preactivated shared-bias rewrite numerically.
    Equiv(commands::equiv::EquivArgs),
    /// Toy separability demonstrations (three-point line, rotated square).
    Demo(commands::demo::DemoArgs),
}

fn effective_seed(cli_seed: Option<u64>) -> u64 {
    cli_seed
        .or_else(|| {
            std::env::var("DACNET_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(1)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(), // clap uses 0 for --help/--version, 2 for usage errors
    };
    if let Some(threads) = cli.threads {
        // best effort: the global pool can only be configured once
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    let seed = effective_seed(cli.seed);
    let code = match cli.command {
        Command::Train(args) => commands::train::run(args, seed),
        Command::Approx(args) => commands::approx::run(args, seed),
        Command::Flops(args) => commands::flops::run(args),
        Command::Equiv(args) => commands::equiv::run(args, seed),
        Command::Demo(args) => commands::demo::run(args, seed),
    };
    std::process::exit(code);
}
