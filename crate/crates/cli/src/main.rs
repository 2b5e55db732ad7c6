use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resotrack_cli::{execute, parse_config, RunError, RunSummary};

#[derive(Parser)]
#[command(version, about = "Resonance-tracking experiments on a simulated resonator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the protocol described by a TOML configuration file.
    Run {
        config: PathBuf,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print nothing on success.
        #[arg(long)]
        quiet: bool,
    },
}

fn run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, quiet: bool) -> Result<(), RunError> {
    let text = std::fs::read_to_string(&config).map_err(RunError::io(format!("reading {}", config.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let summary = execute(&cfg)?;
    if !quiet {
        // A closed pipe (`| head`) is not an error for a finished run.
        let _ = print_summary(&summary);
    }
    Ok(())
}

fn print_summary(summary: &RunSummary) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", summary.run_dir.display())?;
    for (k, v) in &summary.metrics {
        writeln!(out, "  {k} = {v}")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let Command::Run {
        config,
        seed,
        out,
        quiet,
    } = Cli::parse().command;
    match run(config, seed, out, quiet) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
