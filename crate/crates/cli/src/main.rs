//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (IO, malformed files,
//! mismatched configs), 3 numeric failure (diverged training or non-finite
//! values). `POGRID_THREADS` caps the worker thread count for everything
//! that runs in parallel.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use pogrid_cli::commands::{self, available_bundles};
use pogrid_cli::config::{self, Overrides, RunConfig};
use pogrid_core::pipelines::ArchitectureId;
use pogrid_core::scenario::LayoutKind;

pub const THREADS_ENV: &str = "POGRID_THREADS";

#[derive(Parser)]
#[command(
    name = "pogrid",
    version,
    about = "Generate intersection traffic scenarios, train occupancy-grid predictors, evaluate and render them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenarios and write the paired grid dataset.
    Generate {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train one architecture on the dataset's training split.
    Train {
        /// Which predictor to train: arch1, arch2 or arch3.
        #[arg(long)]
        arch: String,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Run a trained bundle on one augmented grid file.
    Predict {
        /// Bundle directory produced by `train`.
        #[arg(long)]
        bundle: PathBuf,
        /// Augmented grid file (.pogg).
        #[arg(long)]
        input: PathBuf,
        /// Output path for the predicted grid (.pogg).
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate trained bundles on the validation split and write CSVs.
    Eval {
        /// Architectures to evaluate; defaults to every bundle present.
        #[arg(long = "arch")]
        archs: Vec<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Render a grid file to a grayscale PGM image.
    Render {
        /// Grid file (.pogg).
        #[arg(long)]
        input: PathBuf,
        /// Output image path (.pgm).
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total scenario count before the train/validation split.
    #[arg(long)]
    n_total: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Prediction instant, seconds.
    #[arg(long)]
    t_pred: Option<f64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Square cell size, meters; rebuilds the ego-centered geometry.
    #[arg(long)]
    cell: Option<f64>,
    /// Road layout: four_way_open or four_way_left_no_entry.
    #[arg(long)]
    road: Option<String>,
    /// Trajectory hypotheses per participant.
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    bundle_dir: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Lib(pogrid_core::Error),
}

impl From<pogrid_core::Error> for CliError {
    fn from(e: pogrid_core::Error) -> Self {
        CliError::Lib(e)
    }
}

fn parse_road(s: &str) -> Result<LayoutKind, CliError> {
    match s {
        "four_way_open" => Ok(LayoutKind::FourWayOpen),
        "four_way_left_no_entry" => Ok(LayoutKind::FourWayLeftNoEntry),
        other => Err(CliError::Usage(format!(
            "unknown road layout {other:?}, expected four_way_open or four_way_left_no_entry"
        ))),
    }
}

fn parse_arch(s: &str) -> Result<ArchitectureId, CliError> {
    ArchitectureId::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn resolve_config(common: &ConfigArgs) -> Result<RunConfig, CliError> {
    let road = common.road.as_deref().map(parse_road).transpose()?;
    let overrides = Overrides {
        seed: common.seed,
        n_total: common.n_total,
        train_fraction: common.train_fraction,
        t_pred: common.t_pred,
        rows: common.rows,
        cols: common.cols,
        cell: common.cell,
        road,
        hypotheses: common.hypotheses,
        dataset_dir: common.dataset_dir.clone(),
        bundle_dir: common.bundle_dir.clone(),
        report_dir: common.report_dir.clone(),
    };
    Ok(config::resolve(common.config.as_deref(), &overrides)?)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| {
            CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot set thread count: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Generate { common } => {
            let config = resolve_config(&common)?;
            let outcome = commands::cmd_generate(&config)?;
            println!(
                "generated {} scenarios ({} train, {} val)",
                outcome.manifest.n_total, outcome.manifest.n_train, outcome.manifest.n_val
            );
            println!("manifest: {}", outcome.manifest_path.display());
        }
        Command::Train { arch, common } => {
            let arch = parse_arch(&arch)?;
            let config = resolve_config(&common)?;
            let outcome = commands::cmd_train(&config, arch)?;
            for line in &outcome.log_lines {
                println!("{line}");
            }
            println!("bundle: {}", outcome.bundle_dir.display());
        }
        Command::Predict { bundle, input, output } => {
            commands::cmd_predict(&bundle, &input, &output)?;
            println!("prediction: {}", output.display());
        }
        Command::Eval { archs, common } => {
            let config = resolve_config(&common)?;
            let archs = if archs.is_empty() {
                available_bundles(&config)
            } else {
                archs.iter().map(|s| parse_arch(s)).collect::<Result<Vec<_>, _>>()?
            };
            let outcome = commands::cmd_eval(&config, &archs)?;
            for line in &outcome.summary_lines {
                println!("{line}");
            }
            println!("report: {}", outcome.report_dir.display());
        }
        Command::Render { input, output } => {
            commands::cmd_render(&input, &output)?;
            println!("image: {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Clap renders help/usage text itself.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
