//! `fieldrecon` command-line runner.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 config error, 3 data error,
//! 4 numerical failure.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fieldrecon::experiment::{self, ExperimentConfig, ExperimentReport, ExportFormat};
use fieldrecon::Error;

#[derive(Parser)]
#[command(
    name = "fieldrecon",
    version,
    about = "Reconstruct temperature fields from sparse sensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep methods, basis counts and sensor counts under one placement.
    Sweep(RunArgs),
    /// Compare surface-line and dam-front vertical-line sensors.
    Fixed(RunArgs),
    /// Write the synthetic libraries of a config as grid and snapshot files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Destination directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and its data without running reconstructions.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::All)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    All,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
            Format::All => ExportFormat::All,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Sweep(args) => run_experiment(&args, experiment::run_sweep),
        Command::Fixed(args) => run_experiment(&args, experiment::run_fixed_sensors),
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let written = experiment::generate_data(&cfg, &dir)?;
            emit(|out| {
                for path in &written {
                    writeln!(out, "{}", path.display())?;
                }
                Ok(())
            });
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = experiment::validate(&cfg)?;
            emit(|out| {
                writeln!(out, "config ok: {}", config.display())?;
                writeln!(out, "grid cells: {}", s.grid_cells)?;
                writeln!(out, "conditions: {}", s.conditions)?;
                writeln!(out, "training snapshots: {:?}", s.training_snapshots)?;
                writeln!(out, "test snapshots: {:?}", s.test_snapshots)?;
                writeln!(out, "planned records: {}", s.planned_records)
            });
            Ok(())
        }
    }
}

fn run_experiment(
    args: &RunArgs,
    runner: fn(&ExperimentConfig) -> Result<ExperimentReport, Error>,
) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let report = runner(&cfg)?;
    let grid = experiment::config_grid(&cfg)?;
    let written = experiment::export(&report, &grid, &dir, args.format.into())?;
    emit(|out| summarize(out, &report, &dir, &written));
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error once the
/// report files exist.
fn emit(f: impl FnOnce(&mut dyn Write) -> io::Result<()>) {
    let mut out = io::stdout().lock();
    if let Err(e) = f(&mut out).and_then(|()| out.flush()) {
        if e.kind() != io::ErrorKind::BrokenPipe {
            eprintln!("warning: could not write summary: {e}");
        }
    }
}

fn summarize(
    out: &mut dyn Write,
    report: &ExperimentReport,
    dir: &Path,
    written: &[String],
) -> io::Result<()> {
    let unconverged = report.records.iter().filter(|r| !r.converged).count();
    writeln!(
        out,
        "{} records, {} skipped cells, {} not converged",
        report.records.len(),
        report.skipped.len(),
        unconverged
    )?;
    for a in &report.aggregates {
        writeln!(
            out,
            "{:<18} {:<14} k={:<3} p={:<4} condition={:<5} error1={:.4} error2={:.4}",
            a.placement.as_str(),
            a.method.as_str(),
            a.k,
            a.p,
            a.condition,
            a.mean_error1,
            a.mean_error2
        )?;
    }
    for s in &report.spreads {
        let pct = s
            .spread_percent
            .map_or_else(|| "undefined".to_string(), |v| format!("{v:.1}%"));
        writeln!(
            out,
            "spread {:<14} k={:<3} p={:<4} condition={:<5} {pct}",
            s.method.as_str(),
            s.k,
            s.p,
            s.condition
        )?;
    }
    writeln!(out, "wrote {} files to {}", written.len(), dir.display())
}
