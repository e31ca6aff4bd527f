//! `fatsim` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fatsim::checkpoint::load_checkpoint;
use fatsim::config::{self, RawConfig};
use fatsim::error::Result;
use fatsim::{analysis, data, report};

#[derive(Parser)]
#[command(name = "fatsim", version, about = "Federated adversarial-training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a federated training run and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the run seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Run every aggregation strategy into its own subdirectory,
        /// sharing the partition seed.
        #[arg(long)]
        strategy_sweep: bool,
    },
    /// Evaluate a checkpoint on the dataset described by a config file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config file naming the model and data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Print per-client shard sizes and label sets for a config's partition.
    PartitionReport {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_raw(path: &PathBuf) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| fatsim::Error::Config(e.to_string()))
}

fn cmd_run(
    config: &PathBuf,
    out: &PathBuf,
    seed: Option<u64>,
    strategy_sweep: bool,
) -> Result<()> {
    let mut raw = read_raw(config)?;
    if let Some(s) = seed {
        raw.fed.seed = s;
    }
    if strategy_sweep {
        for name in ["fedavg", "fedprox", "fedgate", "scaffold", "fedwavg"] {
            let mut variant = raw.clone();
            variant.fed.aggregator = name.into();
            // Pin the partition seed so every strategy sees the same shards.
            variant.data.seed = Some(variant.data.seed.unwrap_or(variant.fed.seed));
            let cfg = config::resolve(&variant)?;
            let dir = out.join(name);
            let arts = report::run_experiment(&cfg, &dir)?;
            let last = arts.records.last().expect("at least one round");
            println!(
                "{name}: accuracy {:.4}, robust accuracy {:.4} -> {}",
                last.accuracy,
                last.robust_accuracy,
                dir.display()
            );
        }
    } else {
        let cfg = config::resolve(&raw)?;
        let arts = report::run_experiment(&cfg, out)?;
        let last = arts.records.last().expect("at least one round");
        println!(
            "{} rounds done: accuracy {:.4}, robust accuracy {:.4} -> {}",
            arts.records.len(),
            last.accuracy,
            last.robust_accuracy,
            out.display()
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &PathBuf, data_spec: &PathBuf) -> Result<()> {
    let cfg = config::parse_config(data_spec)?;
    let params = load_checkpoint(checkpoint)?;
    let (_, test) = report::load_data(&cfg)?;
    let acc = analysis::accuracy(&cfg.model, &params, &test)?;
    let racc = analysis::robust_accuracy(
        &cfg.model,
        &params,
        &test,
        &cfg.fed.attack,
        cfg.fed.seed,
        0,
    )?;
    println!("samples: {}", test.len());
    println!("accuracy: {acc:.6}");
    println!("robust_accuracy: {racc:.6}");
    Ok(())
}

fn cmd_partition_report(config: &PathBuf) -> Result<()> {
    let cfg = config::parse_config(config)?;
    let (train, _) = report::load_data(&cfg)?;
    let shards = data::partition(&train, cfg.fed.clients, &cfg.partition)?;
    println!("clients: {}, total samples: {}", shards.len(), train.len());
    for (k, shard) in shards.iter().enumerate() {
        let labels: Vec<String> = shard.label_set().iter().map(|l| l.to_string()).collect();
        println!(
            "client {k}: {} samples, classes {{{}}}",
            shard.len(),
            labels.join(", ")
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            seed,
            strategy_sweep,
        } => cmd_run(config, out, *seed, *strategy_sweep),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data),
        Command::PartitionReport { config } => cmd_partition_report(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
