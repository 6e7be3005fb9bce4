//! `cpme`: simulate logged bandit data, run the kernel policy tests, and
//! reproduce the calibration, power, herding and OPE studies.

mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliResult;
use crate::settings::Settings;

#[derive(Parser)]
#[command(name = "cpme", version, about = "Counterfactual policy mean embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Run {
    /// TOML file with a `[<command>]` section; flags override it. A written
    /// manifest can be passed here to replay its run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    settings: Settings,
}

#[derive(Subcommand)]
enum Command {
    /// Write a logged dataset for a scenario.
    Simulate(Run),
    /// Run one or more tests of equal counterfactual distributions.
    Test(Run),
    /// Null rejection rates and statistic dumps.
    Calibrate(Run),
    /// Rejection rates over a grid of sample sizes.
    Power(Run),
    /// Herd outcomes from plug-in and doubly robust embeddings.
    Herd(Run),
    /// Off-policy value estimation on the recommendation environment.
    Ope(Run),
}

impl Command {
    fn parts(self) -> (&'static str, Run) {
        match self {
            Command::Simulate(r) => ("simulate", r),
            Command::Test(r) => ("test", r),
            Command::Calibrate(r) => ("calibrate", r),
            Command::Power(r) => ("power", r),
            Command::Herd(r) => ("herd", r),
            Command::Ope(r) => ("ope", r),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, run) = cli.command.parts();
    let settings = match &run.config {
        Some(path) => run.settings.over(Settings::from_file(path, name)?),
        None => run.settings,
    };
    let dir = match name {
        "simulate" => commands::simulate(settings)?,
        "test" => {
            let (dir, text) = commands::test(settings)?;
            print!("{text}");
            dir
        }
        "calibrate" => commands::calibrate(settings)?,
        "power" => commands::power(settings)?,
        "herd" => commands::herd(settings)?,
        "ope" => commands::ope(settings)?,
        _ => unreachable!(),
    };
    log::info!("outputs written to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
