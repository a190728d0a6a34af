mod commands;
mod config;

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ngtype_core::calibrate::{CalibrationError, Threshold};
use ngtype_core::corpus::CorpusError;
use ngtype_core::engine::EngineError;
use ngtype_core::metrics::MetricsError;
use ngtype_core::ngramdb::DbError;

use commands::ReportFormat;
use config::{ConfigArgs, InputError, RunConfig, CONFIG_ENV};

const EXIT_INPUT: u8 = 1;
const EXIT_INTERNAL: u8 = 70;

#[derive(Debug, Parser)]
#[command(name = "ngtype", version, about = "N-gram type and signature recovery for decompiled code")]
struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, env = CONFIG_ENV, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build one type-database ensemble per bitness of the train split
    Train,
    /// Predict variable types for every function of the input corpus
    Infer,
    /// Fit an isotonic calibration map from validation predictions
    Calibrate {
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Score predictions against corpus ground truth
    Eval {
        /// thresholds of the coverage-risk table
        #[arg(long, value_delimiter = ',', default_values = ["none", "0.40", "0.65", "0.90"])]
        grid: Vec<Threshold>,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
        /// also write the coverage-risk table as CSV
        #[arg(long)]
        curve_csv: Option<PathBuf>,
    },
    /// Function signature workflows
    #[command(subcommand)]
    Fn(FnCommand),
    /// Database inspection
    #[command(subcommand)]
    Db(DbCommand),
    /// Print the normalized token stream of a source file (or stdin)
    Tokenize {
        /// one token per line with its class
        #[arg(long)]
        debug: bool,
        file: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum FnCommand {
    /// Build one signature-database ensemble per bitness
    Train,
    /// Predict call-site signatures and aggregate them per callee
    Infer {
        /// also write the per-site predictions
        #[arg(long)]
        sites: Option<PathBuf>,
    },
    /// List callees whose predicted signature has a prefix
    Triage {
        #[arg(long)]
        prefix: String,
    },
}

#[derive(Debug, Subcommand)]
enum DbCommand {
    /// Key, label and size statistics for every member of an ensemble
    Stats { manifests: Vec<PathBuf> },
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Tokenize { debug, file } = &cli.command {
        return commands::tokenize_cmd(file.as_deref(), *debug);
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.settings)?;
    log::debug!("{cfg:?}");
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Infer => commands::infer(&cfg),
        Command::Calibrate { bins } => commands::calibrate(&cfg, bins),
        Command::Eval { grid, format, curve_csv } => commands::eval(&cfg, &grid, format, curve_csv.as_deref()),
        Command::Fn(FnCommand::Train) => commands::fn_train(&cfg),
        Command::Fn(FnCommand::Infer { sites }) => commands::fn_infer(&cfg, sites.as_deref()),
        Command::Fn(FnCommand::Triage { prefix }) => commands::fn_triage(&cfg, &prefix),
        Command::Db(DbCommand::Stats { manifests }) => commands::db_stats(&cfg, &manifests),
        Command::Tokenize { .. } => unreachable!(),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err.chain().any(|e| {
        e.is::<InputError>()
            || e.is::<CorpusError>()
            || e.is::<DbError>()
            || e.is::<EngineError>()
            || e.is::<CalibrationError>()
            || e.is::<MetricsError>()
            || e.is::<std::io::Error>()
            || e.is::<serde_json::Error>()
    });
    if input {
        EXIT_INPUT
    } else {
        EXIT_INTERNAL
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
