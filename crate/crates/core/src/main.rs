use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfc::harness::{execute, exit_code, CommandKind};

#[derive(Parser)]
#[command(
    name = "mfc",
    version,
    about = "Mean-field control experiments for multi-class populations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo check of the one-step deviation counterexample.
    VerifyAppendixM(RunArgs),
    /// Finite-population versus mean-field value gap over population sizes.
    GapSweep(RunArgs),
    /// Randomized certification of the continuity and deviation inequalities.
    LemmaCertify(RunArgs),
    /// Natural policy gradient training on the mean-field system.
    NpgRun(RunArgs),
    /// Closed-form approximation bounds over population sizes.
    BoundTable(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; all available cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::VerifyAppendixM(a) => (CommandKind::VerifyAppendixM, a),
        Command::GapSweep(a) => (CommandKind::GapSweep, a),
        Command::LemmaCertify(a) => (CommandKind::LemmaCertify, a),
        Command::NpgRun(a) => (CommandKind::NpgRun, a),
        Command::BoundTable(a) => (CommandKind::BoundTable, a),
    };
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = execute(kind, &args.config, &args.out, args.seed);
    match &result {
        Ok(o) => {
            println!("{} {}", kind.name(), if o.passed { "passed" } else { "FAILED" });
            for f in &o.files {
                println!("  {}", f.display());
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
