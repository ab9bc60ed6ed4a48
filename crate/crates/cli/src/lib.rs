//! Experiment runner: config parsing, the `dsd` subcommands and their
//! artifacts.
//!
//! Exit codes: 0 success, 1 a checked property failed, 2 usage, config,
//! missing-input or I/O error, 3 training diverged.

pub mod commands;
pub mod config;
pub mod io;
pub mod svg;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{CliError, Run};
use crate::config::{ExperimentConfig, ExperimentKind};

/// Output root used when neither `--out` nor the config names a directory.
pub const OUT_ENV: &str = "DSD_OUT";
/// Fallback when `DSD_OUT` is unset as well.
pub const DEFAULT_OUT_DIR: &str = "dsd-out";

#[derive(Debug, Parser)]
#[command(name = "dsd", version, about = "Denoising score distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config and `DSD_OUT`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write SVG scatter plots.
    #[arg(long, global = true)]
    pub plots: bool,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Check the linear theory against independent oracles.
    Verify,
    /// Build the toy dataset and pretrain the teacher denoiser.
    Pretrain,
    /// Distill the teacher into a one-step generator.
    Distill,
    /// Draw samples from the generator or the teacher.
    Sample,
    /// Score data, teacher samplers and generator against the clean law.
    Eval,
    /// Repeat pretrain, distill and eval for several assumed noise levels.
    SigmaSweep,
}

impl Command {
    pub fn kind(self) -> ExperimentKind {
        match self {
            Command::Verify => ExperimentKind::Verify,
            Command::Pretrain => ExperimentKind::Pretrain,
            Command::Distill => ExperimentKind::Distill,
            Command::Sample => ExperimentKind::Sample,
            Command::Eval => ExperimentKind::Eval,
            Command::SigmaSweep => ExperimentKind::SigmaSweep,
        }
    }
}

/// Resolves the config and output directory the flags describe.
pub fn prepare(cli: &Cli) -> anyhow::Result<Run> {
    let kind = cli.command.kind();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(kind, 0),
    };
    anyhow::ensure!(
        cfg.kind == kind,
        "config is for `{}` but the `{}` command was invoked",
        cfg.kind.name(),
        kind.name()
    );
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.plots |= cli.plots;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok(Run::new(cfg, out)?)
}

/// Runs one invocation and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = prepare(cli).map_err(CliError::from).and_then(|r| {
        let cfg_path = r.out.join("config.json");
        io::write_atomic(&cfg_path, r.cfg.to_json().as_bytes())?;
        r.execute()
    });
    match result {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
