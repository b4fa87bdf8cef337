use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evkf_cli::commands::ledgers_in;
use evkf_cli::{cmd_bounds, cmd_compare, cmd_filter, cmd_simulate, HarnessError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "evkf", version, about = "Exponential family variational Kalman filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets of every trial.
    Simulate(RunArgs),
    /// Run the configured filter and write per-trial ledgers.
    Filter(RunArgs),
    /// Aggregate ledgers into a mean ± std table.
    Compare(CompareArgs),
    /// Report the two-step and single-step bounds and their gap per step.
    Bounds(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Compare the ledgers in this config's output directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where the table goes; defaults to the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Compare ledgers produced by different configs.
    #[arg(long)]
    force: bool,
    /// Additional metrics.json ledgers.
    ledgers: Vec<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        let overrides = Overrides { out: self.out.clone(), seed: self.seed, trials: self.trials };
        RunConfig::load(&self.config, &overrides)
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate(args) => {
            for path in cmd_simulate(&args.load()?)? {
                println!("{}", path.display());
            }
        }
        Command::Filter(args) => {
            for ledger in cmd_filter(&args.load()?)? {
                let metrics: Vec<String> = ledger
                    .metrics
                    .iter()
                    .map(|(k, v)| format!("{k}={}", v.map_or("n/a".into(), |x| format!("{x:.4}"))))
                    .collect();
                println!(
                    "trial {}: {} ({:.1} µs/step)",
                    ledger.trial,
                    metrics.join(" "),
                    ledger.timing.wall_us_per_step
                );
            }
        }
        Command::Bounds(args) => {
            for s in cmd_bounds(&args.load()?)? {
                println!("trial {}: {} steps, min gap {:.3e}, mean gap {:.3e}", s.trial, s.steps, s.min_gap, s.mean_gap);
            }
        }
        Command::Compare(args) => {
            let mut ledgers = args.ledgers.clone();
            let mut out = args.out.clone();
            if let Some(path) = &args.config {
                let overrides = Overrides { out: args.out.clone(), seed: args.seed, trials: args.trials };
                let config = RunConfig::load(path, &overrides)?;
                ledgers.extend(ledgers_in(&config.out_dir)?);
                out.get_or_insert(config.out_dir);
            }
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            cmd_compare(&ledgers, &out, args.force)?;
            print!("{}", std::fs::read_to_string(out.join("comparison.md")).map_err(HarnessError::io(&out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
