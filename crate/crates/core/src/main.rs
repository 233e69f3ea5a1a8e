//! `graphnorm` command-line entry point.
//!
//! Exit codes: 0 when every check passed, 1 when a check failed, 2 on a
//! runtime or configuration error (reported as `graphnorm: error: <kind>: ...`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graphnorm::config::RunConfig;
use graphnorm::harness::{self, Outcome};
use graphnorm::Result;

#[derive(Debug, Parser)]
#[command(name = "graphnorm", about = "Graph normalization experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory holding TU-format dataset files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Output directory for CSV and SVG artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for trial and fold parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Per-key override, `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Singular-value interlacing survey.
    Spectrum,
    /// Regular-graph and complete-graph residual sweeps.
    VerifyProps,
    /// Vanilla vs shifted least-squares convergence.
    LinearTestbed,
    /// Train one norm kind or a comparison sweep.
    Train,
    /// Batch-statistics noise at a BatchNorm input.
    NoiseProbe,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = Some(jobs);
    }
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = build_config(cli)?;
    let work = || match cli.command {
        Command::Spectrum => harness::cmd_spectrum(&cfg),
        Command::VerifyProps => harness::cmd_verify_props(&cfg),
        Command::LinearTestbed => harness::cmd_linear_testbed(&cfg),
        Command::Train => harness::cmd_train(&cfg),
        Command::NoiseProbe => harness::cmd_noise_probe(&cfg),
    };
    match cfg.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| graphnorm::Error::Io(std::io::Error::other(e)))?
            .install(work),
        None => work(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) if outcome.passed => {
            println!("ok: {}", outcome.summary);
            ExitCode::SUCCESS
        }
        Ok(outcome) => {
            eprintln!("graphnorm: check failed: {}", outcome.summary);
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("graphnorm: error: {}: {err}", err.kind());
            ExitCode::from(2)
        }
    }
}
