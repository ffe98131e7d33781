//! Command-line driver: `depthadapt <command> --config FILE [flags]`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime or
//! training error. Setting `DEPTHADAPT_DETERMINISTIC=1` pins the tensor
//! backend to one thread so reductions run in a fixed order.

pub mod commands;
pub mod config;
pub mod error;
pub mod logs;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use depthadapt::datasets::toy::Shift;

use crate::commands::{
    cmd_adapt, cmd_evaluate, cmd_make_toy_data, cmd_profile, cmd_pretrain, cmd_report, AdaptArgs, EvaluateArgs,
    ProfileArgs, ReportFormat, ScalingChoice, Split, ToyArgs,
};
use crate::config::ExperimentConfig;
use crate::error::{CliError, EXIT_OK};

pub const DETERMINISTIC_ENV: &str = "DEPTHADAPT_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "depthadapt", version, about = "Adversarial domain adaptation for monocular depth networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised training on the source domain.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Adversarial adaptation of a pretrained checkpoint to the target domain.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        /// Continue from an adaptation checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after_epoch: Option<u64>,
    },
    /// Depth metrics of a checkpoint on a test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "config")]
        median_scaling: ScalingArg,
        #[arg(long, value_enum, default_value = "target")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MACs, latency, memory and (with a power log) energy per epoch.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tab-separated `unix_seconds<TAB>watts` samples.
        #[arg(long)]
        power_log: Option<PathBuf>,
        /// Epoch log with the training time windows.
        #[arg(long)]
        training_log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Renders a procedural source/target dataset pair.
    MakeToyData {
        /// Supplies `seed` and `model.resolution` when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, value_enum, default_value = "photometric")]
        shift: ShiftArg,
        #[arg(long)]
        seed: Option<u64>,
        /// `HxW`, e.g. `96x96`.
        #[arg(long)]
        resolution: Option<String>,
    },
    /// Combines metrics and profile rows from the output directory.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScalingArg {
    Config,
    On,
    Off,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ShiftArg {
    None,
    Photometric,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Csv,
    Table,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("resolution must look like 96x96, got `{s}`"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Pretrain { config } => {
            cmd_pretrain(&ExperimentConfig::load(&config)?)?;
        }
        Command::Adapt {
            config,
            pretrained,
            resume,
            stop_after_epoch,
        } => {
            let args = AdaptArgs {
                pretrained,
                resume,
                stop_after_epoch,
            };
            cmd_adapt(&ExperimentConfig::load(&config)?, &args)?;
        }
        Command::Evaluate {
            config,
            checkpoint,
            median_scaling,
            split,
            out,
        } => {
            let args = EvaluateArgs {
                checkpoint,
                scaling: match median_scaling {
                    ScalingArg::Config => ScalingChoice::Config,
                    ScalingArg::On => ScalingChoice::On,
                    ScalingArg::Off => ScalingChoice::Off,
                    ScalingArg::Both => ScalingChoice::Both,
                },
                split: match split {
                    SplitArg::Source => Split::Source,
                    SplitArg::Target => Split::Target,
                },
                out,
            };
            cmd_evaluate(&ExperimentConfig::load(&config)?, &args)?;
        }
        Command::Profile {
            config,
            checkpoint,
            power_log,
            training_log,
            out,
        } => {
            let args = ProfileArgs {
                checkpoint,
                power_log,
                training_log,
                out,
            };
            cmd_profile(&ExperimentConfig::load(&config)?, &args)?;
        }
        Command::MakeToyData {
            config,
            out,
            n_train,
            n_test,
            shift,
            seed,
            resolution,
        } => {
            let cfg = config.map(|c| ExperimentConfig::load(&c)).transpose()?;
            let resolution = match (resolution, &cfg) {
                (Some(r), _) => parse_resolution(&r)?,
                (None, Some(c)) => (c.model.resolution[0], c.model.resolution[1]),
                (None, None) => (96, 96),
            };
            cmd_make_toy_data(&ToyArgs {
                out,
                n_train,
                n_test,
                shift: match shift {
                    ShiftArg::None => Shift::None,
                    ShiftArg::Photometric => Shift::Photometric,
                },
                seed: seed.or(cfg.map(|c| c.seed)).unwrap_or(0),
                resolution,
            })?;
        }
        Command::Report { config, format } => {
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Table => ReportFormat::Table,
            };
            cmd_report(&ExperimentConfig::load(&config)?, format)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { crate::error::EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
