//! `adabn`: seeded, file-driven experiment runner for normalization-based
//! domain adaptation. Verbs cover the full pipeline: generate shifted
//! datasets, train, estimate target statistics, evaluate, analyze, and
//! reproduce everything from one config in one call.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{AdaptArgs, AnalyzeArgs, RunCtx};
use config::AnalysisKind;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "adabn",
    version,
    about = "Train, adapt, and analyze normalization statistics across data domains"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Each normalization layer is estimated with the layers before it
    /// already carrying the new domain's statistics.
    Sequential,
    /// All layers estimated in one pass under the source statistics.
    Simultaneous,
}

impl From<ModeArg> for adabn::adabn::EstimationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sequential => adabn::adabn::EstimationMode::Sequential,
            ModeArg::Simultaneous => adabn::adabn::EstimationMode::Simultaneous,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    /// Per-feature symmetric KL between source and target activations.
    Divergence,
    /// Linear probe classifying domains from mini-batch statistic vectors.
    Pilot,
    /// Accuracy as a function of how many target batches feed the estimate.
    Sensitivity,
}

impl From<WhichArg> for AnalysisKind {
    fn from(w: WhichArg) -> Self {
        match w {
            WhichArg::Divergence => AnalysisKind::Divergence,
            WhichArg::Pilot => AnalysisKind::Pilot,
            WhichArg::Sensitivity => AnalysisKind::Sensitivity,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source dataset and its covariate-shifted domains.
    GenData {
        #[arg(long, short)]
        config: PathBuf,
        /// Run directory; defaults to the config's out_dir.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train on the source domain and write a checkpoint with the source's
    /// statistics banked under its domain id.
    Train {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Estimate a domain's statistics from data and write a checkpoint with
    /// the same weights and a grown bank.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Bank key for the estimated statistics; defaults to the dataset's
        /// embedded domain id.
        #[arg(long)]
        domain_id: Option<String>,
        #[arg(long, value_enum, default_value = "sequential")]
        estimation_mode: ModeArg,
        /// Cap on how many batches feed the estimate; default is all data.
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Seed for the batch-budget subsample; defaults to the checkpoint's.
        #[arg(long)]
        seed: Option<u64>,
        /// Output checkpoint path; defaults to adapted.adbn next to the input.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a checkpoint on a dataset, using the bank's statistics for
    /// the dataset's domain when present.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Statistics domain to evaluate under; defaults to the dataset's.
        #[arg(long)]
        domain_id: Option<String>,
        /// Write the JSON report here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Produce a CSV analysis report from a checkpoint and datasets.
    Analyze {
        #[arg(value_enum)]
        which: WhichArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; repeat for multiple domains. Divergence takes
        /// source then target; pilot takes one per domain; sensitivity takes
        /// one labeled target.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Pulls analysis parameters (layers, batch sizes, sweep grid) from
        /// this config when given.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory; defaults to analysis/ next to the checkpoint.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline from one config: gen-data, train, adapt, eval,
    /// analyze, and the baseline-vs-adapted accuracy table.
    Repro {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Print a checkpoint's architecture, bank contents, and provenance.
    DescribeCheckpoint {
        checkpoint: PathBuf,
    },
}

fn make_ctx(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    overwrite: bool,
) -> Result<RunCtx, CliError> {
    let loaded = config::load_config(config)?;
    let seed = seed.unwrap_or(loaded.cfg.seed);
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&loaded.cfg.out_dir));
    Ok(RunCtx {
        loaded,
        config_path: config.to_path_buf(),
        seed,
        out_dir,
        overwrite,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData {
            config,
            out,
            seed,
            overwrite,
        } => {
            commands::cmd_gen_data(&make_ctx(&config, out, seed, overwrite)?)?;
        }
        Cmd::Train {
            config,
            out,
            seed,
            overwrite,
        } => {
            commands::cmd_train(&make_ctx(&config, out, seed, overwrite)?)?;
        }
        Cmd::Adapt {
            checkpoint,
            data,
            domain_id,
            estimation_mode,
            batches,
            batch_size,
            seed,
            out,
            overwrite,
        } => {
            commands::cmd_adapt(&AdaptArgs {
                checkpoint,
                data,
                domain_id,
                mode: estimation_mode.into(),
                batch_size,
                batches,
                seed,
                out,
                overwrite,
            })?;
        }
        Cmd::Eval {
            checkpoint,
            data,
            domain_id,
            out,
        } => {
            commands::cmd_eval(&checkpoint, &data, domain_id.as_deref(), out.as_deref())?;
        }
        Cmd::Analyze {
            which,
            checkpoint,
            data,
            config,
            seed,
            out,
        } => {
            commands::cmd_analyze(&AnalyzeArgs {
                which: which.into(),
                checkpoint,
                data,
                config,
                seed,
                out,
            })?;
        }
        Cmd::Repro {
            config,
            out,
            seed,
            overwrite,
        } => {
            commands::cmd_repro(&make_ctx(&config, out, seed, overwrite)?)?;
        }
        Cmd::DescribeCheckpoint { checkpoint } => {
            commands::cmd_describe(&checkpoint)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version land here too; they are not errors
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
