use clap::{Parser, Subcommand};
use fedcox_cli::commands::{self, AttackArgs, FitArgs, ReportArgs, SimulateArgs};
use fedcox_cli::CliError;
use std::process::ExitCode;

/// Centre-stratified Cox models fitted across data holders that never share
/// patient rows.
#[derive(Debug, Parser)]
#[command(name = "fedcox", version)]
struct Cli {
    /// Worker threads for likelihood evaluation; all cores by default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a multi-centre cohort with per-centre local configs.
    Simulate(SimulateArgs),
    /// Model selection, final fit and performance figures.
    Fit(FitArgs),
    /// Reconstruct patients from an unstratified fit's shared sums.
    Attack(AttackArgs),
    /// Re-emit figures and a summary from a finished fit.
    Report(ReportArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--workers: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a).map(drop),
        Command::Fit(a) => commands::fit(a).map(drop),
        Command::Attack(a) => commands::attack(a).map(drop),
        Command::Report(a) => commands::report(a).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
