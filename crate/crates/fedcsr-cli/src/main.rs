//! Command-line front end: training runs, the distillation-weight grid,
//! leave-one-cuer-out scoring, derivative checks, and dataset export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcsr::config::ExperimentConfig;
use fedcsr::harness::{self, HarnessError};

#[derive(Parser)]
#[command(name = "fedcsr", about = "Federated cued-speech recognition simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML); omitted means built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config's `run.seeds`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads; overrides the config's `run.threads` (0 = default).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train once per seed and write per-round metrics.
    Run,
    /// Train every distillation-weight grid cell per seed.
    Ablate,
    /// Hold each cuer out of training and score it.
    Lodo,
    /// Check every analytic derivative against finite differences.
    Gradcheck,
    /// Write the synthetic dataset split as text files.
    Datadump,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = cli.seeds {
        if seeds.is_empty() {
            return Err(HarnessError::Config(
                "--seeds needs at least one seed".into(),
            ));
        }
        cfg.run.seeds = seeds;
    }
    harness::configure_threads(cli.threads.unwrap_or(cfg.run.threads));
    let out = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.run.out));
    match cli.command {
        Command::Run => {
            let rows = harness::cmd_run(&cfg, &out)?;
            println!(
                "wrote {} rows to {} (summary alongside)",
                rows.len(),
                out.join("metrics.csv").display()
            );
        }
        Command::Ablate => {
            let rows = harness::cmd_ablate(&cfg, &out)?;
            println!(
                "wrote {} rows to {}",
                rows.len(),
                out.join("ablation.csv").display()
            );
        }
        Command::Lodo => {
            let rows = harness::cmd_lodo(&cfg, &out)?;
            println!("{}", fedcsr::harness::LodoRow::csv_header());
            for row in &rows {
                println!("{}", row.csv_row());
            }
            println!("wrote {}", out.join("lodo.csv").display());
        }
        Command::Gradcheck => {
            let rows = harness::cmd_gradcheck()?;
            for row in &rows {
                let status = match (row.expect_failure, row.ok()) {
                    (true, true) => "caught",
                    (true, false) => "MISSED",
                    (false, true) => "pass",
                    (false, false) => "FAIL",
                };
                println!(
                    "{:<34} max_rel_err {:>10.3e}  {}",
                    row.name, row.max_rel_err, status
                );
            }
            harness::gradcheck_verdict(&rows)?;
            println!("all {} checks passed", rows.len());
        }
        Command::Datadump => {
            harness::cmd_datadump(&cfg, &out)?;
            println!("wrote dataset files to {}", out.display());
        }
    }
    Ok(())
}
