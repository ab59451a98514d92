use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drmpc::ambiguity::{min_samples, optimize_epsilon};
use drmpc::harness::{
    fig1_experiment, monte_carlo, table1_experiment, table2_experiment, write_rows, write_trajectories,
    OutputFormat, RunOptions, Scenario,
};
use drmpc::linalg::to_rows;
use drmpc::Result;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "drmpc", version, about = "Data-driven distributionally robust MPC experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Monte-Carlo runs; overrides the scenario.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Master seed; overrides the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    /// Log progress to stderr; `-vvv` also streams per-step diagnostics as JSON lines.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print epsilon, the minimum sample count and kappa as JSON.
    Calibrate {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Synthesize terminal gain, weight, covariance and alpha as JSON.
    Terminal {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Closed-loop runs of one configuration; writes per-step trajectories.
    Run {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        #[arg(long)]
        penalty: Option<f64>,
    },
    /// Sample-size sweep.
    SweepNs {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Lambda-penalty sweep.
    SweepC {
        #[arg(long, value_delimiter = ',')]
        penalties: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Cost along the sample-size sweep plus the exact-moment baseline.
    Fig1 {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Worst-case satisfaction per level and sample size.
    Table1 {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
    /// Cost and report-step satisfaction per lambda penalty.
    Table2 {
        #[arg(long, value_delimiter = ',')]
        penalties: Option<Vec<f64>>,
    },
}

#[derive(Serialize)]
struct CalibrationOutput {
    beta: f64,
    epsilon: f64,
    epsilon_optimized: f64,
    min_samples: usize,
    n_samples: usize,
    gamma: f64,
    kappa: f64,
}

#[derive(Serialize)]
struct TerminalOutput {
    n_samples: usize,
    kappa: f64,
    k: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    sigma_inf: Vec<Vec<f64>>,
    alpha: f64,
    alpha_max: f64,
}

fn output(common: &Common) -> Result<Box<dyn Write>> {
    Ok(match &common.out {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(value: &T, common: &Common) -> Result<()> {
    let mut out = output(common)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let path = common
        .config
        .clone()
        .ok_or_else(|| drmpc::DrmpcError::Config("--config is required".into()))?;
    let mut config = drmpc::harness::ScenarioConfig::load(&path)?;
    if let Some(r) = common.runs {
        config.runs = r;
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let scenario = Scenario::new(config)?;
    let cfg = &scenario.config;
    let runs = cfg.runs;
    let format: OutputFormat = common.format.into();

    match cli.command {
        Command::Calibrate { samples } => {
            let n = samples.unwrap_or(cfg.n_samples);
            let optimized = optimize_epsilon(cfg.beta, &scenario.sub_gaussian)?;
            let epsilon = cfg.epsilon.unwrap_or(optimized);
            let calib = scenario.calibration(n)?;
            write_json(
                &CalibrationOutput {
                    beta: cfg.beta,
                    epsilon,
                    epsilon_optimized: optimized,
                    min_samples: min_samples(cfg.beta, epsilon, &scenario.sub_gaussian)?,
                    n_samples: n,
                    gamma: calib.gamma,
                    kappa: calib.kappa,
                },
                common,
            )
        }
        Command::Terminal { samples } => {
            let setup = scenario.setup(samples.unwrap_or(cfg.n_samples))?;
            let term = scenario.terminal(&setup)?;
            let alpha_max = scenario.alpha_for(&setup.calib, &setup.sigma_hat, None)?;
            write_json(
                &TerminalOutput {
                    n_samples: setup.calib.n_samples,
                    kappa: setup.calib.kappa,
                    k: to_rows(&term.k),
                    p: to_rows(&term.p),
                    sigma_inf: to_rows(&term.sigma_inf),
                    alpha: term.alpha,
                    alpha_max,
                },
                common,
            )
        }
        Command::Run {
            samples,
            level,
            penalty,
        } => {
            let mut setup = scenario.setup(samples.unwrap_or(cfg.n_samples))?;
            setup.level = level;
            if let Some(c) = penalty {
                setup.lambda_penalty = c;
            }
            let controller = scenario.controller(&setup)?;
            let report = monte_carlo(&scenario, &controller, runs, cfg.seed, RunOptions::default())?;
            log::info!(
                "mean cost {:.4} (stderr {:.4}), worst-case satisfaction {:.4} at step {}, mean solve {:?}",
                report.mean_cost,
                report.cost_stderr,
                report.worst_case_rate,
                report.worst_case_step,
                report.mean_solve_time
            );
            write_trajectories(&report, format, output(common)?)
        }
        Command::SweepNs { sizes, level } => {
            let sizes = sizes.unwrap_or_else(|| cfg.sample_sizes.clone());
            write_rows(&scenario.sweep_ns(&sizes, level, runs)?, format, output(common)?)
        }
        Command::SweepC {
            penalties,
            samples,
            level,
        } => {
            let penalties = penalties.unwrap_or_else(|| cfg.penalties.clone());
            let rows = scenario.sweep_c(&penalties, samples.unwrap_or(cfg.n_samples), level, runs)?;
            write_rows(&rows, format, output(common)?)
        }
        Command::Fig1 { sizes, level } => {
            let sizes = sizes.unwrap_or_else(|| cfg.sample_sizes.clone());
            write_rows(&fig1_experiment(&scenario, &sizes, level, runs)?, format, output(common)?)
        }
        Command::Table1 { sizes, levels } => {
            let sizes = sizes.unwrap_or_else(|| {
                if cfg.table_sizes.is_empty() {
                    cfg.sample_sizes.clone()
                } else {
                    cfg.table_sizes.clone()
                }
            });
            let levels = levels.unwrap_or_else(|| cfg.levels.clone());
            write_rows(&table1_experiment(&scenario, &levels, &sizes, runs)?, format, output(common)?)
        }
        Command::Table2 { penalties } => {
            let penalties = penalties.unwrap_or_else(|| cfg.penalties.clone());
            write_rows(&table2_experiment(&scenario, &penalties, runs)?, format, output(common)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
