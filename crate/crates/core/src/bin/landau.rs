use clap::{Parser, ValueEnum};
use landau_hilbert::config::RunConfig;
use landau_hilbert::harness::{init_threads, run_subcommand, HarnessError, Subcommand, EXIT_CONFIG};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    CheckKernel,
    CheckLinearized,
    EulerSolve,
    HilbertBuild,
    KnudsenSweep,
    Report,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::CheckKernel => Subcommand::CheckKernel,
            Command::CheckLinearized => Subcommand::CheckLinearized,
            Command::EulerSolve => Subcommand::EulerSolve,
            Command::HilbertBuild => Subcommand::HilbertBuild,
            Command::KnudsenSweep => Subcommand::KnudsenSweep,
            Command::Report => Subcommand::Report,
        }
    }
}

/// Hydrodynamic-limit experiments for the relativistic Landau equation.
///
/// Exit codes: 0 success, 2 configuration or output error, 3 missing
/// prerequisite, 4 numerical failure. Check outcomes never change the exit
/// code; they are written to the `*_checks.csv` files and `summary.md`.
#[derive(Debug, Parser)]
#[command(name = "landau", version)]
struct Cli {
    /// TOML configuration; omitted keys take their defaults
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// overrides `output_dir` from the configuration
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(value_enum)]
    command: Command,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.output {
        cfg.output_dir = o;
    }
    for c in run_subcommand(cli.command.into(), &cfg)? {
        eprintln!(
            "[landau] {} criterion {} {}: {:.4e} (threshold {:e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.criterion,
            c.name,
            c.value,
            c.threshold
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("landau: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
