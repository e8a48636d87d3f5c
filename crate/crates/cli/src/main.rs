//! `fpcost`: runs scenarios and single computations of the torus path-cost engine.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails or a computation errors,
//! 2 for usage and configuration errors.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fpcost_core::harness::{
    appendix_oracles, emit_report, path_json, read_measure, read_path, read_reports, run_experiment, to_json,
    write_kernel_dump, write_path, AppendixKind, DriftSpec, ExperimentConfig, ReportFormat, ScenarioReport,
    StepSummary,
};
use fpcost_core::{energy_ladder, fp_solve, solve_step, Error, SinkhornOptions};

#[derive(Parser, Debug)]
#[command(name = "fpcost", version, about = "Entropy-penalized path costs on the flat torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the scenarios described by one or more JSON configs.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Run the scenarios concurrently, one thread each.
        #[arg(long)]
        parallel: bool,
    },
    /// Solve one step between two measure files and print the result as JSON.
    Step {
        #[arg(long)]
        mu1: PathBuf,
        #[arg(long)]
        mu2: PathBuf,
        #[arg(long)]
        h: f64,
        /// Write the lifted kernel as little-endian f64 values.
        #[arg(long)]
        dump_kernel: Option<PathBuf>,
    },
    /// Energy ladder of a stored measure path.
    Path {
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ladder: Vec<f64>,
    },
    /// Solve the Fokker-Planck equation and write the measure path.
    Fp {
        /// Drift as inline JSON or a JSON file.
        #[arg(long)]
        drift: String,
        #[arg(long)]
        mu0: PathBuf,
        /// Final time; the path starts at 0.
        #[arg(long)]
        t: f64,
        #[arg(long)]
        dt: f64,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the oracle against the closed-form appendix costs.
    VerifyAppendix {
        #[arg(long, value_delimiter = ',', default_value = "trace,diag,offdiag,out")]
        kinds: Vec<String>,
        /// Velocity-grid nodes per √h.
        #[arg(long, default_value_t = 8)]
        vgrid: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-emit the scenario reports found in a directory and print a summary.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Output directory (defaults to `dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<Error>(),
            Some(
                Error::Json { .. }
                    | Error::InvalidParameter { .. }
                    | Error::UnsupportedDimension(_)
                    | Error::Io { .. }
                    | Error::GridMismatch(_)
                    | Error::NotNormalized { .. }
                    | Error::InvalidWeight { .. }
            )
        )
    })
}

/// Ok(true) when all checks pass.
fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run { configs, parallel } => run(&configs, parallel),
        Command::Step { mu1, mu2, h, dump_kernel } => {
            let a = read_measure(&mu1)?;
            let b = read_measure(&mu2)?;
            let result = solve_step(&a, &b, h, &SinkhornOptions::default())?;
            if let Some(file) = dump_kernel {
                write_kernel_dump(&file, &result.kernel)?;
            }
            emit(to_json(&StepSummary::new(&result))?)?;
            Ok(result.converged)
        }
        Command::Path { path, ladder } => {
            let path = read_path(&path)?;
            let report = energy_ladder(&path, &ladder, &SinkhornOptions::default())?;
            emit(to_json(&report)?)?;
            Ok(report.rungs.iter().all(|r| r.converged()))
        }
        Command::Fp { drift, mu0, t, dt, out } => {
            let mu0 = read_measure(&mu0)?;
            let spec = DriftSpec::parse(&drift)?;
            let base = if drift.trim_start().starts_with('{') {
                PathBuf::new()
            } else {
                Path::new(&drift).parent().map(Path::to_path_buf).unwrap_or_default()
            };
            let field = spec.build(*mu0.grid(), &base)?;
            let path = fp_solve(&mu0, &field, (0.0, t), dt)?;
            match out {
                Some(file) => write_path(&file, &path)?,
                None => emit(path_json(&path)?)?,
            }
            Ok(true)
        }
        Command::VerifyAppendix { kinds, vgrid, samples, seed } => {
            let kinds = kinds
                .iter()
                .map(|k| AppendixKind::parse(k))
                .collect::<fpcost_core::Result<Vec<_>>>()?;
            let report = appendix_oracles(&kinds, vgrid, samples, seed)?;
            print_summary(&report);
            Ok(report.passed)
        }
        Command::Report { dir, format, out } => {
            let reports = read_reports(&dir)?;
            let target = out.unwrap_or_else(|| dir.clone());
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            for report in &reports {
                emit_report(&target, report, format)?;
                print_summary(report);
            }
            Ok(reports.iter().all(|r| r.passed))
        }
    }
}

fn run(paths: &[PathBuf], parallel: bool) -> Result<bool> {
    // All configs are validated before anything runs.
    let configs = paths
        .iter()
        .map(|p| ExperimentConfig::load(p))
        .collect::<fpcost_core::Result<Vec<_>>>()?;
    let mut outcomes: Vec<(String, Result<ScenarioReport>)> = if parallel {
        thread::scope(|scope| {
            let handles: Vec<_> = configs
                .iter()
                .map(|c| scope.spawn(move || run_one(c)))
                .collect();
            configs
                .iter()
                .zip(handles)
                .map(|(c, h)| {
                    let outcome = h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("scenario thread panicked")));
                    (c.scenario.to_string(), outcome)
                })
                .collect()
        })
    } else {
        configs.iter().map(|c| (c.scenario.to_string(), run_one(c))).collect()
    };
    outcomes.sort_by(|a, b| a.0.cmp(&b.0));
    let mut all = true;
    for (name, outcome) in &outcomes {
        match outcome {
            Ok(report) => {
                print_summary(report);
                all &= report.passed;
            }
            Err(err) => {
                println!("{name}: ERROR {}", describe(err));
                all = false;
            }
        }
    }
    Ok(all)
}

fn run_one(config: &ExperimentConfig) -> Result<ScenarioReport> {
    let output = run_experiment(config).with_context(|| format!("scenario {}", config.scenario))?;
    Ok(output.report)
}

fn print_summary(report: &ScenarioReport) {
    let status = if report.passed { "PASS" } else { "FAIL" };
    println!("{}: {status}", report.scenario);
    for check in &report.checks {
        let status = if check.passed { "pass" } else { "FAIL" };
        println!("  {status} {} = {:e} ({})", check.name, check.value, check.detail);
    }
}

fn emit(bytes: Vec<u8>) -> Result<()> {
    io::stdout().write_all(&bytes)?;
    Ok(())
}
