//! Experiment runner: reproducible subcommands driven by JSON configs.

pub mod commands;
pub mod config;
pub mod report;

use std::path::Path;

use anyhow::{Context, Result};

pub use commands::{cmd_compare, cmd_evolve, cmd_spectrum, cmd_train, cmd_verify_theory, RunContext};
pub use config::{CommonConfig, Overrides};
pub use report::{Check, CheckStatus, OverallStatus, RunReport};

pub const COMMANDS: [&str; 5] = ["verify-theory", "evolve", "spectrum", "train", "compare"];

fn run_with<C: CommonConfig>(
    path: &Path,
    overrides: &Overrides,
    env_out: Option<&str>,
    f: fn(C, &RunContext) -> Result<RunReport>,
) -> Result<RunReport> {
    let mut cfg: C = config::load_config(path)?;
    let out = cfg.apply(overrides, env_out);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    f(cfg, &RunContext::new(out, base))
}

/// Loads the config at `path` and runs `command`. `env_out` is the value of
/// the `NLD_OUT` variable, if set.
pub fn run(command: &str, path: &Path, overrides: &Overrides, env_out: Option<&str>) -> Result<RunReport> {
    match command {
        "verify-theory" => run_with(path, overrides, env_out, cmd_verify_theory),
        "evolve" => run_with(path, overrides, env_out, cmd_evolve),
        "spectrum" => run_with(path, overrides, env_out, cmd_spectrum),
        "train" => run_with(path, overrides, env_out, cmd_train),
        "compare" => run_with(path, overrides, env_out, cmd_compare),
        other => Err(anyhow::anyhow!("unknown command {other:?}")).context(format!("expected one of {COMMANDS:?}")),
    }
}
