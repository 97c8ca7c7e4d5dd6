//! `latecut` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric failure. Failures end with one diagnostic line on stderr:
//!
//! ```text
//! latecut: error kind=data code=2 message="..."
//! ```

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use log::LevelFilter;

#[derive(Debug, Parser)]
#[command(name = "latecut", version, about = "Latency-aware residual block pruning and distillation")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Log verbosity (off, error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "LATECUT_LOG")]
    log_level: LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure or model per-block latency savings of a checkpoint.
    Profile(commands::ProfileArgs),
    /// Rank blocks and choose which to remove.
    Prune(commands::PruneArgs),
    /// Fine-tune a pruned student against teacher features.
    Distill(commands::DistillArgs),
    /// Run the streaming serve loop over a sample file.
    Serve(commands::ServeArgs),
    /// Run an experiment grid on the synthetic testbed.
    Experiment(commands::ExperimentArgs),
    /// Summarize an experiment results directory.
    Report(commands::ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn at(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::data(format!("{}: {err}", path.display()))
    }
}

impl From<latecut::Error> for CliError {
    fn from(err: latecut::Error) -> Self {
        let kind = match err.kind() {
            latecut::ErrorKind::Data => Kind::Data,
            latecut::ErrorKind::Numeric => Kind::Numeric,
        };
        CliError {
            kind,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::data(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::data(err.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn report_failure(err: &CliError) -> ExitCode {
    let message = serde_json::to_string(&err.message).unwrap_or_else(|_| "\"?\"".into());
    eprintln!(
        "latecut: error kind={} code={} message={message}",
        err.kind.name(),
        err.kind.code()
    );
    ExitCode::from(err.kind.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => match err.kind() {
            ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => {
                print!("{}", err.render());
                return ExitCode::SUCCESS;
            }
            _ => {
                eprint!("{}", err.render());
                let message = if err.kind() == ClapErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    "missing subcommand".to_string()
                } else {
                    let first = err.to_string().lines().next().unwrap_or("invalid usage").to_string();
                    first.trim_start_matches("error: ").to_string()
                };
                return report_failure(&CliError::usage(message));
            }
        },
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Profile(args) => commands::profile(args),
        Command::Prune(args) => commands::prune(args),
        Command::Distill(args) => commands::distill(args),
        Command::Serve(args) => commands::serve(args),
        Command::Experiment(args) => commands::experiment(args, cli.log_level),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => report_failure(&err),
    }
}

/// Directory that receives the resolved-config log of a run writing `out`.
fn output_dir(out: &std::path::Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
