use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use splithmc::data::{simulate_logistic, tiered_sd_schedule};
use splithmc::experiment::{figure1, run_experiment, DataSource, ExperimentConfig, ReportFormat};

#[derive(Parser, Debug)]
#[command(name = "splithmc", version, about = "Standard and split HMC for Bayesian logistic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of MCMC iterations per sampler (overrides the config file).
    #[arg(long, global = true)]
    iterations: Option<usize>,

    /// Iterations dropped before computing diagnostics (overrides the config file).
    #[arg(long, global = true)]
    burn_in: Option<usize>,

    /// Where to write the CSV report (overrides the config file).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Name of the 0/1 label column in CSV files.
    #[arg(long, global = true)]
    label_column: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run { config: PathBuf },
    /// Simulate a logistic-regression dataset and write it as CSV.
    Simulate {
        n: usize,
        p: usize,
        seed: u64,
        out: PathBuf,
    },
    /// Write the HMC and random-walk trajectories on the correlated bivariate normal.
    Figure1 { out_dir: PathBuf },
}

fn run(cli: &Cli, path: &PathBuf) -> Result<()> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(iterations) = cli.iterations {
        config.iterations = iterations;
    }
    if let Some(burn_in) = cli.burn_in {
        config.burn_in = burn_in;
    }
    if let Some(output) = &cli.output {
        config.output = Some(output.clone());
    }
    if let (Some(label), DataSource::Csv { label_column, .. }) = (&cli.label_column, &mut config.data) {
        *label_column = label.clone();
    }

    let report = run_experiment(&config)?;
    if matches!(config.format, ReportFormat::Table | ReportFormat::Both) {
        print!("{}", report.to_table());
    }
    if matches!(config.format, ReportFormat::Csv | ReportFormat::Both) {
        match &config.output {
            Some(path) => {
                report.write_csv(path)?;
                info!("wrote {}", path.display());
            }
            None => print!("{}", report.to_csv()),
        }
    }
    if report.rows.is_empty() {
        bail!("no sampler completed");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config } => run(&cli, config),
        Command::Simulate { n, p, seed, out } => {
            let label = cli.label_column.as_deref().unwrap_or("y");
            let (data, _) = simulate_logistic(*n, &tiered_sd_schedule(*p), *seed)?;
            data.write_csv(out, label)?;
            info!("wrote {} cases with {} covariates to {}", n, p, out.display());
            Ok(())
        }
        Command::Figure1 { out_dir } => {
            let out = figure1(out_dir, cli.seed.unwrap_or(0))?;
            info!("wrote {} and {}", out.hmc.display(), out.rwm.display());
            Ok(())
        }
    }
}
