use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use hoplab::manifest::ExperimentManifest;
use hoplab::{report, runner, with_workers};

#[derive(Parser)]
#[command(name = "hoplab", version, about = "Run variable-range hopping experiments from JSON manifests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one manifest and write results.csv, fits.csv and summary.json.
    Run {
        manifest: PathBuf,
        /// Override the manifest's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the manifest's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long, env = "HOPLAB_WORKERS")]
        workers: Option<NonZeroUsize>,
    },
    /// Print tables of fitted vs predicted exponents for the runs in DIR.
    Report { dir: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { manifest, seed, out, workers } => {
            let mut m = ExperimentManifest::load(&manifest)?;
            if seed.is_some() {
                m.seed = seed;
            }
            let dir = runner::output_dir(&m, out)?;
            let summary = with_workers(workers.map(NonZeroUsize::get), || runner::execute(&m, &dir))??;
            eprintln!("wrote {} rows to {}", summary.rows, dir.display());
            print!("{}", report::render(&summary));
        }
        Command::Report { dir } => print!("{}", report::emit_report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if runner::is_numerical_failure(&e) { "numerical failure" } else { "error" };
            eprintln!("{kind}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
