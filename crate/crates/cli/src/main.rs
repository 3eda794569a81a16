use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trilevel_core::forgetting::{read_stats_csv, summarize};
use trilevel_core::macs::cost_report;
use trilevel_core::train::{evaluate_checkpoint, train, TrainOptions};
use trilevel_core::{CoreError, DatasetKind, RunConfig, SparsityConfig};

#[derive(Parser)]
#[command(name = "trilevel", version, about = "Tri-level sparse ViT training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Ignore the sparsity ratios and run the plain dense loop.
        #[arg(long)]
        dense_only: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Top-1 test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// mnist, cifar10, synthetic or synthetic:TRAIN/TEST.
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Sparsity to apply at inference: a sparsity object or a run config holding one.
        #[arg(long)]
        sparsity: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Analytic MAC report for a run configuration.
    Macs {
        #[arg(long)]
        config: PathBuf,
        /// Training-set size for the whole-run total (default: the dataset's).
        #[arg(long)]
        dataset_size: Option<usize>,
    },
    /// Summarize the per-example statistics of a finished run.
    DumpStats {
        #[arg(long)]
        run: PathBuf,
    },
}

fn train_size(kind: &DatasetKind) -> usize {
    match kind {
        DatasetKind::Mnist => 60_000,
        DatasetKind::Cifar10 => 50_000,
        DatasetKind::Synthetic { train, .. } => *train,
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Train {
            config,
            out_dir,
            seed,
            dense_only,
            quiet,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let opts = TrainOptions {
                dense_only,
                progress: !quiet,
                ..TrainOptions::default()
            };
            if !quiet {
                eprintln!("{}", trilevel_core::train::METRICS_HEADER);
            }
            let s = train(&cfg, &opts)?;
            println!(
                "final val_acc {:.4} after {} epochs; forward MACs {}; outputs in {}",
                s.final_val_acc,
                s.metrics.len(),
                s.training_macs,
                s.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            data_dir,
            sparsity,
            batch_size,
        } => {
            let kind = DatasetKind::parse(&dataset)?;
            let sp = match sparsity {
                Some(p) => {
                    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                    if let Some(section) = v.get_mut("sparsity") {
                        v = section.take();
                    }
                    Some(serde_json::from_value::<SparsityConfig>(v)?)
                }
                None => None,
            };
            let r = evaluate_checkpoint(&checkpoint, &kind, &data_dir, sp.as_ref(), batch_size, None)?;
            println!("accuracy {:.4} on {} test examples", r.accuracy, r.examples);
        }
        Command::Macs {
            config,
            dataset_size,
        } => {
            let cfg = RunConfig::load(&config)?;
            let size = dataset_size.unwrap_or_else(|| train_size(&cfg.dataset));
            let report = cost_report(&cfg.model, &cfg.sparsity, cfg.epochs, size);
            println!("{report}");
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::DumpStats { run } => {
            let rows = read_stats_csv(&run.join("examples_stats.csv"))?;
            let s = summarize(&rows);
            println!("examples          {}", s.examples);
            println!("never learned     {}", s.never_learned);
            println!("unforgettable     {}", s.unforgettable);
            println!("forgetting events {}", s.total_forgetting_events);
            println!("max forget count  {}", s.max_forget_count);
            println!("mean attn stat    {:.6e}", s.mean_attn_stat);
            println!("forget_count  examples");
            for (count, n) in s.histogram {
                println!("{count:>12}  {n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
