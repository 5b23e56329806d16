use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nld_cli::config::OUT_ENV;
use nld_cli::Overrides;

#[derive(Parser)]
#[command(name = "nld", version, about = "Nonlocal diffusion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config document
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config and NLD_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the mean, variance, decay-rate and Poincaré statements on a random kernel
    VerifyTheory(RunArgs),
    /// Evolve a field under a proposed, original or Markov stepper
    Evolve(RunArgs),
    /// Eigenvalue report of a weight matrix or a trained checkpoint
    Spectrum(RunArgs),
    /// Train the toy network on the synthetic task
    Train(RunArgs),
    /// Train several stage variants with identical settings and compare them
    Compare(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::VerifyTheory(a) => ("verify-theory", a),
        Command::Evolve(a) => ("evolve", a),
        Command::Spectrum(a) => ("spectrum", a),
        Command::Train(a) => ("train", a),
        Command::Compare(a) => ("compare", a),
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out.clone(),
    };
    let env_out = std::env::var(OUT_ENV).ok();
    match nld_cli::run(name, &args.config, &overrides, env_out.as_deref()) {
        Ok(report) => {
            for c in &report.checks {
                println!("{:<14} {}", c.status.as_str(), c.name);
            }
            let out = report.config.get("out_dir").and_then(|v| v.as_str()).unwrap_or(".");
            println!("{} -> {out}/report.json", if report.passed() { "PASS" } else { "FAIL" });
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
