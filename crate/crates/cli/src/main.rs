//! `crowdtask` CLI: a config-driven pipeline that aggregates crowd ABC
//! scores, trains baseline and multi-task lesion classifiers over stratified
//! folds, blends the multi-task models into ensembles and reports
//! cross-validated AUC.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

mod commands;
mod config;
mod paths;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crowdtask::error::{Error, Result};

use commands::Context;
use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "crowdtask", version, about = "Crowd-feature multi-task lesion classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (TOML). Not needed with --synthetic.
    #[arg(long, global = false)]
    config: Option<PathBuf>,

    /// Run on the built-in synthetic dataset (256 images, 2 folds, 2 epochs,
    /// tiny_test encoder); no external data required.
    #[arg(long)]
    synthetic: bool,

    /// Output root override (with --synthetic also the data root;
    /// defaults to ./synthetic_run).
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest annotations, standardize, aggregate and write the feature table.
    Prepare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate the stratified cross-validation splits.
    Split {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of folds override.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train the experiment grid (arms x variants x folds).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// baseline, asymmetry, border, color or all.
        #[arg(long, default_value = "all")]
        arm: String,
        /// frozen, nonfrozen or all.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Fold index or all.
        #[arg(long, default_value = "all")]
        fold: String,
        /// Parallel training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Combine the multi-task predictions (averaging and/or DE-optimized).
    Ensemble {
        #[command(flatten)]
        common: CommonArgs,
        /// avg, de or all.
        #[arg(long, default_value = "all")]
        strategy: String,
        /// frozen, nonfrozen or all.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Fold index or all.
        #[arg(long, default_value = "all")]
        fold: String,
        /// Subset the DE weights are optimized on: val (default) or test.
        #[arg(long)]
        optimize_on: Option<String>,
    },
    /// Aggregate fold AUCs into the results table and plots.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// txt, csv or both.
        #[arg(long, default_value = "both")]
        format: String,
    },
}

fn resolve_context(common: &CommonArgs) -> Result<Context> {
    let mut config = if common.synthetic {
        let root = common
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("synthetic_run"));
        PipelineConfig::synthetic(&root, common.seed.unwrap_or(0))
    } else {
        let path = common.config.as_ref().ok_or_else(|| {
            Error::config("either --config <file> or --synthetic is required")
        })?;
        PipelineConfig::from_file(path)?
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if !common.synthetic {
        if let Some(out) = &common.out_dir {
            config.paths.output = out.clone();
        }
    }
    Context::new(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common } => {
            let ctx = resolve_context(&common)?;
            commands::prepare(&ctx)
        }
        Command::Split { common, folds } => {
            let mut ctx = resolve_context(&common)?;
            if let Some(k) = folds {
                ctx.config.dataset.folds = k;
                ctx = Context::new(ctx.config)?;
            }
            commands::split(&ctx)
        }
        Command::Train {
            common,
            arm,
            variant,
            fold,
            jobs,
        } => {
            let ctx = resolve_context(&common)?;
            let selection = commands::TrainSelection {
                arms: commands::parse_arms(&arm)?,
                variants: commands::parse_variants(&variant)?,
                folds: commands::parse_fold(&fold, ctx.config.dataset.folds)?,
                jobs,
            };
            commands::train(&ctx, &selection)
        }
        Command::Ensemble {
            common,
            strategy,
            variant,
            fold,
            optimize_on,
        } => {
            let ctx = resolve_context(&common)?;
            let selection = commands::EnsembleSelection {
                strategies: commands::parse_strategies(&strategy)?,
                variants: commands::parse_variants(&variant)?,
                folds: commands::parse_fold(&fold, ctx.config.dataset.folds)?,
                optimize_on,
            };
            commands::ensemble(&ctx, &selection)
        }
        Command::Report { common, format } => {
            let ctx = resolve_context(&common)?;
            commands::report(&ctx, &commands::parse_formats(&format)?)
        }
    }
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) => 2,
        // A bad config file is a usage problem, not a runtime failure.
        Error::Parse { path, .. } if path.extension().is_some_and(|e| e == "toml") => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
