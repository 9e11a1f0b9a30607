//! `combimatch` command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Exit codes: 1 usage, 2 data, 3 numeric failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(combimatch::Error),
}

impl From<combimatch::Error> for CliError {
    fn from(e: combimatch::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use combimatch::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::NonFiniteValue { .. } | E::DegenerateFrame) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "combimatch", version, about = "Combinative matching for geometric shape assembly")]
pub struct Cli {
    /// Sectioned `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Sets every seed (data, training, evaluation).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap; all commands run on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy dataset (train, val and test splits plus manifest).
    GenToy {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines epoch log (defaults to the checkpoint path plus `.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Assemble every object of a split and write a metrics report.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Score ground-truth poses instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Assemble one object or a set of PLY parts.
    Assemble {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Object record written by gen-toy.
        #[arg(long, conflicts_with = "parts")]
        object: Option<PathBuf>,
        /// PLY files, one per part.
        #[arg(long, num_args = 1..)]
        parts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export score heat maps for one source point and the orientation fields.
    ExportHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        object: PathBuf,
        /// Point index in the source part.
        #[arg(long)]
        source: usize,
        #[arg(long, default_value_t = 0)]
        source_part: usize,
        #[arg(long, default_value_t = 1)]
        target_part: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Configuration commands.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    /// Print the effective configuration with provenance tags.
    Show,
}

fn init_logging() {
    use std::io::Write;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() -> ExitCode {
    let keys = config::default_keys();
    let mut cmd = Cli::command();
    for key in keys.keys() {
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key.clone())
                .global(true)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help_heading("Configuration keys"),
        );
    }
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let flags = commands::key_flags(&matches, keys.keys());
    init_logging();
    match commands::run(cli, &flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
