use std::path::{Path, PathBuf};
use std::process::ExitCode;

use binleak::harness::{self, SweepAxis};
use binleak::{params, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "binleak",
    version,
    about = "Crafted-module inversion attack against secure-aggregation federated learning"
)]
struct Cli {
    /// Output root; each run writes to `<out>/<config hash>/`.
    #[arg(long, global = true, default_value = "binleak-out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run every value of one sweep axis.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
    },
    /// Describe a parameter file.
    Inspect { file: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Index(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => 3,
        Error::Evaluation(_) | Error::Protocol(_) => 1,
    }
}

fn config_at(path: &Path, seed: Option<u64>) -> binleak::Result<(harness::ExperimentConfig, PathBuf)> {
    let mut config = harness::load_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

fn dispatch(cli: &Cli) -> binleak::Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let (config, base) = config_at(config, cli.seed)?;
            let (report, dir) = harness::run(&config, &base, &cli.out)?;
            let s = &report.summary;
            println!(
                "rate {:.4} ({}/{}), bins recovered {}/{}, reconstruction {:.3}s",
                s.rates.rate, s.rates.successes, s.rates.total, s.bins_recovered, s.k, s.timing.reconstruction_seconds
            );
            println!("artifacts: {}", dir.display());
        }
        Command::Sweep { config, axis } => {
            let axis: SweepAxis = axis.parse()?;
            let (config, base) = config_at(config, cli.seed)?;
            let rows = harness::sweep(&config, axis, &base, Some(&cli.out))?;
            print!("{}", harness::sweep_csv(axis, &rows));
        }
        Command::Inspect { file } => {
            print!("{}", params::inspect(file)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
