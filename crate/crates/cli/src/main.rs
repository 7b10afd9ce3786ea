#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod error;
mod experiments;
mod output;
mod plot;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use gearkdv_core::par::Execution;

use error::RunError;
use experiments::{Context, Experiment};
use output::{execute, RunRequest};

#[derive(Parser, Debug)]
#[command(name = "gearkdv", version, about = "Experiments on coupled KdV systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random seed (overrides the config seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Suppress progress and summary lines.
    #[arg(long, global = true)]
    quiet: bool,
    /// Exit with status 3 when any acceptance check fails.
    #[arg(long = "assert", global = true)]
    assert_checks: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the configured system and track conserved quantities.
    Simulate,
    /// Picard iteration of the Duhamel map with contraction diagnostics.
    Picard,
    /// PDE residuals, windowed norms and spectral decay fits.
    Diagnose,
    /// Operator identities, Leibniz expansion and dilation identity.
    OperatorCheck,
    /// Randomized bilinear estimate probe.
    BilinearProbe,
    /// Smoothing refinement study over approximate delta data.
    Refine,
    /// Run one experiment for each value of a scalar config key.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dotted config key to vary, e.g. grid.N or experiment.params.t_probe.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    /// Experiment run in each cell.
    #[arg(long)]
    experiment: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<u8, RunError> {
    let common = &cli.common;
    let mut doc = match &common.config {
        Some(p) => config::load(p)?,
        None => Table::new(),
    };
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| RunError::config("--seed must fit in a signed 64-bit integer"))?;
        doc.insert("seed".into(), Value::Integer(seed));
    }
    let base = common
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let cfg = config::resolve(&doc, &base)?;

    let experiment = match &cli.command {
        Command::Simulate => Experiment::Simulate,
        Command::Picard => Experiment::Picard,
        Command::Diagnose => Experiment::Diagnose,
        Command::OperatorCheck => Experiment::OperatorCheck,
        Command::BilinearProbe => Experiment::BilinearProbe,
        Command::Refine => Experiment::Refine,
        Command::Sweep(args) => {
            let spec = sweep::spec_from(&doc, args.axis.clone(), args.values.clone(), args.experiment.clone())?;
            let out = out_dir(common, &cfg, "sweep");
            if !common.quiet {
                eprintln!(
                    "sweep: {} over {} = {} value(s) -> {}",
                    spec.experiment.name(),
                    spec.axis,
                    spec.values.len(),
                    out.display()
                );
            }
            let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
            let cells = sweep::run(&doc, &base, &spec, &out, common.assert_checks, workers)?;
            for c in &cells {
                if let Some(msg) = &c.report.message {
                    eprintln!("  {} = {}: {} ({msg})", spec.axis, c.value, c.report.status);
                } else if !common.quiet {
                    eprintln!("  {} = {}: {}", spec.axis, c.value, c.report.status);
                }
            }
            return Ok(sweep::exit_code(&cells));
        }
    };

    if let Some(name) = &cfg.experiment {
        if name.parse::<Experiment>().ok() != Some(experiment) && !common.quiet {
            eprintln!("note: experiment.name = {name:?} ignored; running {}", experiment.name());
        }
    }
    let out = out_dir(common, &cfg, experiment.name());
    if !common.quiet {
        eprintln!("{}: writing to {}", experiment.name(), out.display());
    }
    let req = RunRequest {
        experiment,
        cfg: &cfg,
        doc: &doc,
        config_path: common.config.as_deref(),
        out_dir: &out,
        ctx: Context {
            exec: Execution::default(),
            seed: cfg.seed,
        },
        assert: common.assert_checks,
    };
    let report = execute(&req);
    if let Some(msg) = &report.message {
        eprintln!("{}: {msg}", report.status);
    } else if !common.quiet {
        eprintln!("{}: ok", experiment.name());
    }
    Ok(report.exit_code)
}

fn out_dir(common: &Common, cfg: &config::RunConfig, name: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(name))
}
