//! Command line runner: execute a configured run, report a finished run's
//! metrics, or sweep the heterogeneity coefficient over several seeds.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fcit_core::run::{run_scenario, write_artifacts, MetricsReport, RunConfig};

#[derive(Parser)]
#[command(name = "fcit", about = "Deterministic federated continual instruction tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario from a JSON config and write its artifacts.
    Run {
        /// JSON run config; omitted fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for results_matrix.csv, metrics.json, rounds.csv.
        #[arg(long, default_value = "run-out")]
        out: PathBuf,
    },
    /// Print the metrics of a finished run directory.
    Report {
        /// Directory a previous `run` wrote.
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a beta x seed grid and print per-beta summaries.
    Sweep {
        /// JSON run config used as the template.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated Dirichlet concentrations.
        #[arg(long, default_value = "0.5,1.0,5.0", value_delimiter = ',')]
        betas: Vec<f64>,
        /// Number of seeds per beta, starting at the config's seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Root directory for per-run artifacts.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, out } => run_command(&config, seed, &out),
        Command::Report { run } => report_command(&run),
        Command::Sweep { config, betas, seeds, out } => {
            sweep_command(&config, &betas, seeds, &out)
        }
    }
}

fn run_command(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut config = RunConfig::from_json_file(config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let output = run_scenario(&config)?;
    write_artifacts(out, &output)?;
    println!("run complete: seed {} -> {}", config.seed, out.display());
    print_report(&output.report);
    if let Some(cache) = &output.final_cache {
        println!("cache entries: {}", cache.len());
    }
    Ok(())
}

fn report_command(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("metrics.json");
    let report: MetricsReport = serde_json::from_str(
        &std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?,
    )?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &MetricsReport) {
    println!("last: {:.2}", report.last);
    println!("avg:  {:.2}", report.avg);
    if report.forgetting.is_empty() {
        println!("forgetting: (single stage)");
    } else {
        println!("forgetting:");
        for (task, drop) in &report.forgetting {
            println!("  task {task}: {drop:.2}");
        }
    }
}

fn sweep_command(config_path: &Path, betas: &[f64], seeds: u64, out: &Path) -> Result<()> {
    anyhow::ensure!(seeds > 0, "need at least one seed");
    let template = RunConfig::from_json_file(config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;

    println!("{:>6} {:>6} {:>8} {:>8}", "beta", "seed", "last", "avg");
    for &beta in betas {
        let mut lasts = Vec::new();
        let mut avgs = Vec::new();
        for offset in 0..seeds {
            let mut config = template.clone();
            config.scenario.beta = beta;
            config.seed = template.seed + offset;
            let output = run_scenario(&config)?;
            let dir = out.join(format!("beta-{beta}")).join(format!("seed-{}", config.seed));
            write_artifacts(&dir, &output)?;
            println!(
                "{beta:>6} {:>6} {:>8.2} {:>8.2}",
                config.seed, output.report.last, output.report.avg
            );
            lasts.push(output.report.last);
            avgs.push(output.report.avg);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!("{beta:>6} {:>6} {:>8.2} {:>8.2}  <- mean", "all", mean(&lasts), mean(&avgs));
    }
    Ok(())
}
