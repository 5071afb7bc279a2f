use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbmlab_cli::catalog::Catalog;
use fbmlab_cli::config::{ExperimentConfig, Format};
use fbmlab_cli::runner::{execute, write_outputs, Overrides};
use fbmlab_cli::CliError;

/// Particle-picture simulations of fractional Brownian motion and relatives.
#[derive(Parser)]
#[command(name = "fbmlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file. Exits 0 when its check passes, 1 when it fails.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Worker threads (0 uses every core). Results do not depend on it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// List the shipped experiments.
    List {
        #[arg(long, default_value = "configs/catalog.toml")]
        catalog: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Check an experiment file without running it.
    Validate { config: PathBuf },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Run { config, seed, replicates, threads, out_dir, format } => {
            let cfg = Overrides { seed, replicates, out_dir, format }.apply(ExperimentConfig::load(&config)?)?;
            let outcome = fbmlab::par::with_threads(threads, || execute(&cfg))?;
            let files = write_outputs(&cfg, &outcome)?;
            print!("{}", outcome.summary);
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(outcome.pass)
        }
        Command::List { catalog, format } => {
            let cat = Catalog::load(&catalog)?;
            match format {
                Format::Csv => print!("{}", cat.table()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&cat.entry)?),
            }
            Ok(true)
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}: ok ({}, {})", config.display(), cfg.model.kind(), cfg.statement);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
