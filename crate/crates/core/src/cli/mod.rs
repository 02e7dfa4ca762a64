//! Command-line front end: `run`, `compare` and `print-defaults`.

mod compare;
mod config;
mod experiment;

pub use compare::{compare_runs, compare_summaries, render, Comparison, RunEntry, Winner};
pub use config::{
    parse_config, BananaConfig, ConfigError, ConjugateConfig, EvalConfig, ExperimentConfig, FlowConfig,
    FunnelConfig, GaussianConfig, MultilevelConfig, TargetConfig, TargetSpec, TARGET_NAMES,
};
pub use experiment::{
    build_map, build_target, read_summary, reload_map, run_experiment, run_many, table1_stds, AffineSummary,
    BuiltTarget, EssPoint, QMoments, RunError, RunOutcome, RunSummary, Table1Summary, DATA_STREAM, EVAL_STREAM,
    FLOW_INIT_STREAM, TABLE1_STREAM_BASE,
};

use clap::{Parser, Subcommand};
use log::error;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tsclimb", version, about = "Transport score climbing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate one or more experiment configs.
    Run {
        /// JSON config file; repeat for a sweep.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory (with several configs, one subdirectory each).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Configs to run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare two finished runs.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// JSON with `std` (and optionally `mean`) of the true posterior.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Where to write compare.json (defaults to the current directory).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the default configuration as JSON.
    PrintDefaults,
}

fn exit_code(e: &RunError) -> i32 {
    match e {
        RunError::Io { .. } | RunError::Csv(_) => EXIT_IO,
        RunError::Json(_) => EXIT_IO,
        RunError::Setup(_) | RunError::Target(_) => EXIT_CONFIG,
        RunError::Train(crate::climb::TrainError::Config(_)) => EXIT_CONFIG,
        RunError::Train(crate::climb::TrainError::Io(_)) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

fn config_exit(e: &ConfigError) -> i32 {
    match e {
        ConfigError::Read { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Installs the logger from `TSCLIMB_LOG` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("TSCLIMB_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::PrintDefaults => {
            println!("{}", ExperimentConfig::defaults().to_json());
            EXIT_OK
        }
        Command::Compare { dir_a, dir_b, truth, out } => match compare_runs(&dir_a, &dir_b, truth.as_deref(), &out) {
            Ok(report) => {
                print!("{}", render(&report));
                EXIT_OK
            }
            Err(e) => {
                error!("{e}");
                exit_code(&e)
            }
        },
        Command::Run { configs, seed, out, jobs } => {
            let mut parsed = Vec::with_capacity(configs.len());
            for path in &configs {
                match parse_config(path) {
                    Ok(mut c) => {
                        if let Some(s) = seed {
                            c.seed = s;
                        }
                        if let Some(o) = &out {
                            c.output_dir = if configs.len() == 1 {
                                o.clone()
                            } else {
                                let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
                                o.join(stem)
                            };
                        }
                        parsed.push(c);
                    }
                    Err(e) => {
                        error!("{e}");
                        return config_exit(&e);
                    }
                }
            }
            let mut code = EXIT_OK;
            for (res, path) in run_many(&parsed, jobs).into_iter().zip(&configs) {
                match res {
                    Ok(o) => println!("{}: wrote {} ({:.2}s)", path.display(), o.output_dir.display(), o.wall_seconds),
                    Err(e) => {
                        error!("{}: {e}", path.display());
                        code = code.max(exit_code(&e));
                    }
                }
            }
            code
        }
    }
}
