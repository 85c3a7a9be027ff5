//! Batch driver: generate data, train the quality predictor and the bitrate
//! agent, evaluate controllers, and run hyperparameter sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "qarc", version, about = "Quality-aware video rate control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Asynchronous training threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Controllers to evaluate: comma-separated qarc, fixed:<0-4>, loss,
    /// delay, offline-optimal, or all.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// QoE weight preset.
    #[arg(long, global = true, value_parser = ["baseline-qoe", "beta10-qoe"])]
    preset: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write bandwidth traces, quality curves and (optionally) frame clips.
    GenData,
    /// Train the quality predictor with early stopping.
    TrainVqpn,
    /// Train the bitrate agent with asynchronous actor-critic.
    TrainVqrl,
    /// Compare controllers on the held-out traces.
    Eval,
    /// Hyperparameter sweeps.
    Sweep {
        #[arg(value_enum)]
        target: SweepTarget,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepTarget {
    /// Predictor grid: filters × hidden units × learning rate.
    VqpnTable1,
    /// Agent grid: history length × filters (× backbone).
    VqrlFig7,
}

/// A failed command, by cause; each maps to its own exit status.
#[derive(Debug)]
pub enum Failure {
    /// Invalid or inconsistent configuration (exit 2).
    Config(anyhow::Error),
    /// Missing or malformed input data (exit 3).
    Data(anyhow::Error),
    /// Failure while computing or writing results (exit 4).
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Runtime(e) => e,
        }
    }
}

/// Tags an error with its [`Failure`] class.
pub trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).config()?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(p) = &cli.policy {
        cfg.policy = p.clone();
    }
    if let Some(p) = &cli.preset {
        cfg.preset = p.clone();
    }
    cfg.validate().context("invalid configuration").config()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainVqpn => commands::train_vqpn(&cfg),
        Command::TrainVqrl => commands::train_vqrl(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Sweep { target: SweepTarget::VqpnTable1 } => commands::sweep_vqpn(&cfg),
        Command::Sweep { target: SweepTarget::VqrlFig7 } => commands::sweep_vqrl(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
