//! Command-line front end for training and evaluating the recommender.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use commands::{EvalRequest, SplitName};
use config::{extract_overrides, keys_help, RunConfig};

/// Process exit codes by failure category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const TRAINING: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Parser, Debug)]
#[command(
    name = "bipcl",
    version,
    about = "Intent-enhanced sequential recommendation with contrastive training"
)]
#[command(after_help = keys_help())]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter and split the interaction file, then print dataset statistics.
    Prepare,
    /// Train a model, writing checkpoints and a training log.
    Train {
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also report sparse / normal / popular user groups.
        #[arg(long)]
        groups: bool,
        /// Write item representations to this file.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Train and test several variants and tabulate the results.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,no_intent,no_cl")]
        variants: Vec<String>,
    },
    /// Angular distribution of item intent representations.
    Geometry {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Second checkpoint to summarize alongside the first.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

/// Builds the configuration from defaults, the file, overrides and
/// `--seed`, in that order of precedence.
pub fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli, cfg: &RunConfig) -> Result<String> {
    match &cli.command {
        Command::Prepare => commands::cmd_prepare(cfg),
        Command::Train { resume } => commands::cmd_train(cfg, *resume),
        Command::Eval {
            checkpoint,
            split,
            groups,
            export,
        } => commands::cmd_eval(
            cfg,
            &EvalRequest {
                checkpoint: checkpoint.as_deref(),
                split: match split {
                    SplitArg::Val => SplitName::Val,
                    SplitArg::Test => SplitName::Test,
                },
                groups: *groups,
                export: export.as_deref(),
            },
        ),
        Command::Ablate { variants } => commands::cmd_ablate(cfg, variants),
        Command::Geometry {
            checkpoint,
            compare,
        } => commands::cmd_geometry(cfg, checkpoint.as_deref(), compare.as_deref()),
    }
}

/// A problem with the command line or configuration rather than the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Fails with a [`UsageError`].
#[macro_export]
macro_rules! usage {
    ($($arg:tt)*) => {
        return Err($crate::UsageError(format!($($arg)*)).into())
    };
}

/// Maps an error to its exit category.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use bipcl::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Usage(_) | E::Dimension { .. } => exit::USAGE,
                E::Parse { .. } | E::EmptyLog | E::EmptyGraph | E::EmptySplit | E::Format(_) => {
                    exit::DATA
                }
                E::NonFiniteLoss { .. } => exit::TRAINING,
                E::Io(_) => exit::IO,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return exit::USAGE;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::OTHER
}

/// Entry point shared by the binary and tests: returns the exit code.
pub fn run(args: Vec<String>, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32 {
    let (overrides, rest) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            return exit::USAGE;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let text = e.render().to_string();
            let _ = if code == exit::OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = resolve_config(&cli, &overrides).and_then(|cfg| execute(&cli, &cfg));
    match result {
        Ok(text) => {
            let _ = write!(out, "{text}");
            exit::OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
