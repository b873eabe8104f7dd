//! `meagraph` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use config::{ClusterMethod, CommonFlags, RunConfig, SweepMode, SynthKind, UsageError};

#[derive(Parser)]
#[command(name = "meagraph", version, about = "Cluster and prune atomic descriptor datasets")]
struct Cli {
    #[command(flatten)]
    common: CommonFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder; writes model.ckpt and loss.csv.
    Train,
    /// Cluster the dataset; writes clusters.csv and summary.json.
    Cluster {
        #[arg(long, value_enum)]
        method: Option<ClusterMethod>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Inference pooling rate for the meagraph method.
        #[arg(long)]
        pool_rate: Option<f64>,
        /// Cluster count for kmeans.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Prune within clusters; writes retained.txt, pruned.csv and prune_accounting.json.
    Prune {
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Pruning-ratio sweep; writes curve.csv and report.json.
    Sweep {
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<SweepMode>,
    },
    /// Fit and score the ridge force model; writes report.json.
    FitEval,
    /// Generate a synthetic dataset; writes dataset.csv and labels.csv.
    Synth {
        #[arg(long, value_enum)]
        kind: Option<SynthKind>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg: RunConfig = config::load(&cli.common)?;
    match cli.command {
        Command::Train => commands::cmd_train(cfg),
        Command::Cluster {
            method,
            checkpoint,
            pool_rate,
            k,
        } => {
            if let Some(m) = method {
                cfg.cluster.method = m;
            }
            if checkpoint.is_some() {
                cfg.cluster.checkpoint = checkpoint;
            }
            if pool_rate.is_some() {
                cfg.cluster.pool_rate = pool_rate;
            }
            if let Some(k) = k {
                cfg.cluster.k = k;
            }
            commands::cmd_cluster(cfg)
        }
        Command::Prune { clusters, fraction } => {
            if clusters.is_some() {
                cfg.prune.clusters = clusters;
            }
            if let Some(f) = fraction {
                cfg.prune.fraction = f;
            }
            commands::cmd_prune(cfg)
        }
        Command::Sweep { clusters, mode } => {
            if clusters.is_some() {
                cfg.sweep.clusters = clusters;
            }
            if let Some(m) = mode {
                cfg.sweep.mode = m;
            }
            commands::cmd_sweep(cfg)
        }
        Command::FitEval => commands::cmd_fit_eval(cfg),
        Command::Synth { kind } => {
            if let Some(k) = kind {
                cfg.synth.kind = k;
            }
            commands::cmd_synth(cfg)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use meagraph::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 2,
                E::NonFinite(_) | E::RankDeficient { .. } | E::DegenerateBatch(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
