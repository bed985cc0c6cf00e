//! `survbench`: simulate cohorts, fit, cross-validate, tune and explain
//! competing-risks models.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RiskModes;

#[derive(Debug, Parser)]
#[command(name = "survbench", version, about = "Benchmark harness for dynamic competing-risks models")]
struct Cli {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for the global pool.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Log progress (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Cohort file overriding the configured source.
#[derive(Debug, Clone, Args)]
pub struct CohortArgs {
    /// JSONL cohort, one patient per line.
    #[arg(long)]
    pub cohort: Option<PathBuf>,

    /// Feature schema; defaults to schema.json beside the cohort.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a simulated cohort and its schema.
    Simulate {
        /// Patients; selects the benchmark generator.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one model on the whole cohort and save it.
    Fit {
        #[arg(long)]
        model: String,
        #[command(flatten)]
        data: CohortArgs,
    },
    /// Patient-level k-fold cross-validation of the configured models.
    Cv {
        /// Comma-separated model names replacing the configured list.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        risk_mode: Option<RiskModeArg>,
        #[command(flatten)]
        data: CohortArgs,
    },
    /// Hyperparameter search on a validation split.
    Hpo {
        #[arg(long)]
        model: String,
        /// JSON object of dimension name to candidate values.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Maximum training budget in epochs.
        #[arg(long = "R", visible_alias = "r-max", default_value_t = 70.0)]
        r_max: f64,
        #[arg(long, default_value_t = 3)]
        eta: usize,
        /// Random-search draws for non-neural models.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: CohortArgs,
    },
    /// Integrated-gradients feature importance of a saved sequence model.
    Explain {
        /// Model file written by `fit`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        cause: usize,
        /// Interpolation steps of the path integral.
        #[arg(long, default_value_t = 64)]
        steps: usize,
        /// Explain at most this many records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Rebuild the tables from a saved reports.json.
    Report {
        /// Directory holding reports.json; defaults to the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RiskModeArg {
    SemiCompeting,
    Competing,
    Both,
}

impl From<RiskModeArg> for RiskModes {
    fn from(m: RiskModeArg) -> Self {
        match m {
            RiskModeArg::SemiCompeting => Self::SemiCompeting,
            RiskModeArg::Competing => Self::Competing,
            RiskModeArg::Both => Self::Both,
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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> error::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| error::CliError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let mut cfg = config::ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(out) = cli.output {
        cfg.output = out;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Simulate { n, seed } => commands::simulate(&cfg, n, seed),
        Command::Fit { model, data } => commands::fit(&mut cfg, &model, &data),
        Command::Cv { models, k, seed, risk_mode, data } => {
            if let Some(m) = models {
                cfg.models = config::model_list(&m)?;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = risk_mode {
                cfg.risk_mode = r.into();
            }
            commands::cv(&mut cfg, &data, threads)
        }
        Command::Hpo { model, space, r_max, eta, trials, val_fraction, seed, data } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let opts = commands::HpoOptions { model, space, r_max, eta, trials, val_fraction };
            commands::hpo(&mut cfg, &opts, &data)
        }
        Command::Explain { model, cohort, schema, cause, steps, limit } => {
            let data = CohortArgs { cohort: Some(cohort), schema };
            commands::explain(&cfg, &model, &data, cause, steps, limit)
        }
        Command::Report { input } => commands::report(&cfg, input.as_deref()),
    }
}
