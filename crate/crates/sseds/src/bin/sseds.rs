//! Pipeline driver: one subcommand per stage, all state on disk.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sseds::config::PipelineConfig;
use sseds::dataio::SplitTag;
use sseds::error::Error;
use sseds::pipeline::{
    run_eval, run_ingest, run_prune, run_pretrain, run_report, run_retrain, prune_to, Artifacts,
    RetrainOverrides,
};

#[derive(Parser)]
#[command(
    name = "sseds",
    about = "Single-shot embedding dimension search for CTR models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> SplitTag {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Valid => SplitTag::Valid,
            SplitArg::Test => SplitTag::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw data, build vocabularies, encode and cache the splits.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Train the uniform-dimension model and write its checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// One-pass saliency pruning: mask, report, mixed-dimension checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Override the configured parameter budget.
        #[arg(long)]
        kappa: Option<f64>,
        /// Additionally prune at these budgets, writing each report set
        /// under out/sweep_<kappa>/.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Build the slim model from the searched dimensions and retrain it.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Keep the slim initialization untouched (no retraining epochs).
        #[arg(long)]
        no_retrain: bool,
        /// Random slim embeddings instead of the inherited winning ticket.
        #[arg(long)]
        random_init: bool,
    },
    /// Evaluate a checkpoint on a cached split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (defaults to the slim checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Consolidate pruning and evaluation artifacts into report files.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Ingest { common }
            | Command::Pretrain { common }
            | Command::Prune { common, .. }
            | Command::Retrain { common, .. }
            | Command::Eval { common, .. }
            | Command::Report { common } => common,
        }
    }
}

/// SSEDS_THREADS caps worker parallelism. All reductions are sequential
/// (equivalent to a cap of 1), so any valid value keeps results identical;
/// the variable is validated so misconfiguration fails loudly.
fn check_threads_env() -> Result<(), Error> {
    match std::env::var("SSEDS_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::config(format!(
                "SSEDS_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config is required"))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    check_threads_env()?;
    let mut config = load_config(cli.command.common())?;
    match cli.command {
        Command::Ingest { .. } => {
            let summary = run_ingest(&config)?;
            if summary.up_to_date {
                println!("cache up to date");
            } else {
                println!(
                    "ingested {} train / {} valid / {} test records ({} skipped)",
                    summary.train_records,
                    summary.valid_records,
                    summary.test_records,
                    summary.skipped_rows
                );
            }
        }
        Command::Pretrain { .. } => {
            let log = run_pretrain(&config)?;
            for e in &log {
                println!(
                    "epoch {}: train loss {:.6}, valid auc {:.6}",
                    e.epoch, e.train_loss, e.valid_auc
                );
            }
        }
        Command::Prune { kappa, sweep, .. } => {
            if let Some(k) = kappa {
                config.pruning.kappa = k;
                config.validate()?;
            }
            let report = run_prune(&config)?;
            println!(
                "kappa {}: kept {} of {} embedding params, {} field(s) removed, {} pass(es)",
                report.kappa,
                report.kept_embedding_params,
                report.total_embedding_params,
                report.removed_fields.len(),
                report.forward_backward_passes
            );
            for k in sweep {
                let mut cfg = config.clone();
                cfg.pruning.kappa = k;
                cfg.validate()?;
                let dir = config.out_dir.join(format!("sweep_{k}"));
                let r = prune_to(&cfg, &dir)?;
                println!(
                    "kappa {}: kept {} of {} embedding params -> {}",
                    k,
                    r.kept_embedding_params,
                    r.total_embedding_params,
                    dir.display()
                );
            }
        }
        Command::Retrain {
            no_retrain,
            random_init,
            ..
        } => {
            let log = run_retrain(
                &config,
                RetrainOverrides {
                    no_retrain,
                    random_init,
                },
            )?;
            if log.is_empty() {
                println!("slim model written without retraining");
            }
            for e in &log {
                println!(
                    "epoch {}: train loss {:.6}, valid auc {:.6}",
                    e.epoch, e.train_loss, e.valid_auc
                );
            }
        }
        Command::Eval {
            checkpoint, split, ..
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| Artifacts::new(&config.out_dir).slim());
            let record = run_eval(&config, &ckpt, split.into())?;
            println!("{}", serde_json::to_string_pretty(&record)?);
        }
        Command::Report { .. } => {
            let summary = run_report(&config)?;
            println!(
                "kappa {}: kept {}/{} embedding params, {} field(s) removed",
                summary.kappa,
                summary.kept_embedding_params,
                summary.total_embedding_params,
                summary.removed_fields
            );
            for (source, params, auc) in &summary.eval_points {
                println!("{source}: {params} params, auc {auc:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
