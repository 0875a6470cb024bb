use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mflab::csv::read_columns;
use mflab::runner::{exit_code, run_many, scenarios_in, validate_file, RunOptions, RunReport};
use mflab_core::stability::{fit_rate, FitMode};

#[derive(Parser)]
#[command(
    name = "mflab",
    version,
    about = "Mean-field ensemble Kalman experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenario files.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Directory receiving the CSV and summary files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for independent scenarios.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Replace the seed of particle and appendix scenarios.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Check a scenario file against the schema without running it.
    Validate { scenario: PathBuf },
    /// Run every `*.json` scenario in a directory and aggregate pass/fail.
    Suite {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Least-squares decay rate of the `w2` column of a CSV file.
    FitRate {
        csv: PathBuf,
        /// Tail fraction of the rows used in the fit.
        #[arg(long, default_value_t = 0.5)]
        window: f64,
        #[arg(long, value_enum, default_value_t = Mode::Time)]
        mode: Mode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Slope of ln w2 against t.
    Time,
    /// Slope of ln w2 against ln(2t + 1).
    LogAlpha,
}

fn print_reports(reports: &[RunReport]) {
    for r in reports {
        let name = r
            .name
            .clone()
            .unwrap_or_else(|| r.scenario.display().to_string());
        if r.message.is_empty() {
            println!("[{}] {name}", r.status.label());
        } else {
            println!("[{}] {name}: {}", r.status.label(), r.message);
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenarios,
            out,
            jobs,
            seed_override,
        } => {
            let opts = RunOptions {
                out_dir: out,
                seed_override,
            };
            let reports = run_many(&scenarios, &opts, jobs);
            print_reports(&reports);
            ExitCode::from(exit_code(&reports))
        }
        Command::Validate { scenario } => match validate_file(&scenario) {
            Ok(p) => {
                println!(
                    "{}: valid {} scenario",
                    scenario.display(),
                    p.experiment.as_str()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}: {e}", scenario.display());
                ExitCode::from(1)
            }
        },
        Command::Suite { dir, out, jobs } => {
            let paths = match scenarios_in(&dir) {
                Ok(p) if !p.is_empty() => p,
                Ok(_) => {
                    eprintln!("no scenario files in {}", dir.display());
                    return ExitCode::from(1);
                }
                Err(e) => {
                    eprintln!("cannot list {}: {e}", dir.display());
                    return ExitCode::from(1);
                }
            };
            let reports = run_many(
                &paths,
                &RunOptions {
                    out_dir: out,
                    seed_override: None,
                },
                jobs,
            );
            print_reports(&reports);
            let passed = reports.iter().filter(|r| r.status.exit_code() == 0).count();
            println!("suite: {passed}/{} scenarios passed", reports.len());
            ExitCode::from(exit_code(&reports))
        }
        Command::FitRate { csv, window, mode } => match fit_command(&csv, window, mode) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn fit_command(csv: &PathBuf, window: f64, mode: Mode) -> anyhow::Result<()> {
    let text =
        std::fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let (t, w2) = read_columns(&text, "t", "w2").map_err(anyhow::Error::msg)?;
    if !(window > 0.0 && window <= 1.0) {
        bail!("window must lie in (0, 1], got {window}");
    }
    let mode = match mode {
        Mode::Time => FitMode::Time,
        Mode::LogAlpha => FitMode::LogAlpha,
    };
    let fit = fit_rate(&t, &w2, window, mode)?;
    if fit.truncated {
        eprintln!(
            "warning: w2 underflows; fit window truncated to {} points",
            fit.points
        );
    }
    println!("{:.16e}", fit.slope);
    Ok(())
}
