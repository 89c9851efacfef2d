//! `exitwise` command-line interface.
//!
//! Exit codes: 0 ok, 2 configuration or input error, 3 numeric failure,
//! 4 checkpoint mismatch, 5 infeasible budget.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exitwise::model::ExitId;
use exitwise::runtime::Budget;
use exitwise::Error;

use commands::{Axis, BenchArgs, EvalArgs, InferArgs, Mode, TrainArgs};
use config::{RunConfig, SplitName};
use report::Format;

#[derive(Parser)]
#[command(name = "exitwise", version, about = "Multi-exit self-distillation for speech emotion recognition")]
struct Cli {
    /// Output format for records on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Raise log verbosity on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-path override `section.key=value`, applied in order.
    #[arg(short = 'o', long = "override", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> exitwise::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a self-distillation model or one of the baselines.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Mode::SelfDistill)]
        mode: Mode,
        /// Truncation depth, or student depth for layer-wise distillation.
        #[arg(long)]
        depth: Option<usize>,
        /// Checkpoint whose matching tensors initialize the model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Report UAR per exit on one data split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Architecture file; defaults to model.json beside the checkpoint.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::Dev)]
        split: SplitName,
        /// Report every exit, not only the teacher.
        #[arg(long)]
        per_exit: bool,
        /// Add a row for the fused student exits.
        #[arg(long)]
        fusion: bool,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Classify one WAV file at a chosen exit or under a budget.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Exit catalog; defaults to catalog.json beside the checkpoint.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Resource budget `kind=limit` with kind one of params, flops, latency, depth.
        #[arg(long, conflicts_with = "exit")]
        budget: Option<Budget>,
        /// Exit id such as `layer2` or `teacher`.
        #[arg(long)]
        exit: Option<ExitId>,
        /// Only select the exit; do not run the model.
        #[arg(long)]
        dry_run: bool,
    },
    /// Measure per-exit latency and record it in the catalog.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Train one model per grid point along an axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generate the synthetic corpus.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "corpus.bin")]
        out: PathBuf,
        /// Also write one WAV per clip plus manifest.tsv here.
        #[arg(long)]
        wav_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::ArchitectureMismatch { .. }
        | Error::TensorTable { .. }
        | Error::Truncated(_) => 4,
        Error::BudgetInfeasible { .. } => 5,
        _ => 2,
    }
}

fn threads_from_env() -> exitwise::Result<Option<usize>> {
    match std::env::var("EXITWISE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("EXITWISE_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> exitwise::Result<()> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let format = cli.format;
    match cli.command {
        Command::Train {
            config,
            mode,
            depth,
            init,
        } => commands::train(
            &config.load()?,
            TrainArgs {
                mode,
                depth,
                init: init.as_deref(),
            },
            format,
        ),
        Command::Eval {
            config,
            checkpoint,
            arch,
            split,
            per_exit,
            fusion,
            batch_size,
        } => commands::eval(
            &config.load()?,
            EvalArgs {
                checkpoint: &checkpoint,
                arch: arch.as_deref(),
                split,
                per_exit,
                fusion,
                batch_size,
            },
            format,
        ),
        Command::Infer {
            checkpoint,
            arch,
            catalog,
            input,
            budget,
            exit,
            dry_run,
        } => commands::infer(
            InferArgs {
                checkpoint: checkpoint.as_deref(),
                arch: arch.as_deref(),
                catalog: catalog.as_deref(),
                input: input.as_deref(),
                budget,
                exit,
                dry_run,
            },
            format,
        ),
        Command::Bench {
            checkpoint,
            arch,
            batch,
            repeats,
        } => commands::bench_cmd(
            BenchArgs {
                checkpoint: &checkpoint,
                arch: arch.as_deref(),
                batch,
                repeats,
            },
            format,
        ),
        Command::Sweep { config, axis, init } => commands::sweep(&config.load()?, axis, init.as_deref(), format),
        Command::SynthData { config, out, wav_dir } => {
            commands::synth_data(&config.load()?, &out, wav_dir.as_deref(), format)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
