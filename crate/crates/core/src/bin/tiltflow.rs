use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tiltflow::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tiltflow", version, about = "Tilted-distribution inverse design at 2D scale")]
struct Cli {
    /// JSON config document (must contain `seed` unless given via --set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set guidance.n_mc=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for trajectory fan-out.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    GenWorld,
    TrainFlow,
    TrainCost,
    Optimize,
    Generate,
    Check,
    Evaluate,
}

fn run(cli: Cli) -> tiltflow::error::Result<bool> {
    let mut overrides = cli.overrides;
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_json("{}", &overrides)?,
    };
    let manifest = match cli.command {
        Command::GenWorld => experiment::cmd_gen_world(&cfg)?,
        Command::TrainFlow => experiment::cmd_train_flow(&cfg)?,
        Command::TrainCost => experiment::cmd_train_cost(&cfg)?,
        Command::Optimize => experiment::cmd_optimize(&cfg)?,
        Command::Generate => experiment::cmd_generate(&cfg)?,
        Command::Evaluate => experiment::cmd_evaluate(&cfg)?,
        Command::Check => {
            let (m, report) = experiment::cmd_check(&cfg)?;
            for a in &m.artifacts {
                println!("{}", a.display());
            }
            println!("checks {}", if report.pass { "passed" } else { "FAILED" });
            return Ok(report.pass);
        }
    };
    for a in &manifest.artifacts {
        println!("{}", a.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
