use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedcell::harness;

#[derive(Parser)]
#[command(name = "fedcell", about = "Federated learning over an unreliable cellular uplink", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write per-trial CSV artifacts
    Run { config: PathBuf },
    /// Run every aggregation rule on identical schedules and channel draws
    CompareRules { config: PathBuf },
    /// Print analytic vs Monte-Carlo per-device success probabilities
    DiagSuccess { config: PathBuf },
    /// Print the optimal resource-block allocation for the sampled cell
    Schedule { config: PathBuf },
    /// Sweep the convergence bound over local-step counts
    Bound { config: PathBuf },
}

fn run(cli: Cli) -> fedcell::Result<()> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Run { config } => {
            let cfg = harness::load_config(&config)?;
            for path in harness::run_experiment(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::CompareRules { config } => {
            let cfg = harness::load_config(&config)?;
            println!("{}", harness::compare_rules(&cfg)?.display());
        }
        Command::DiagSuccess { config } => {
            let cfg = harness::load_config(&config)?;
            harness::diag_success(&cfg, &mut stdout.lock())?;
        }
        Command::Schedule { config } => {
            let cfg = harness::load_config(&config)?;
            harness::schedule_cmd(&cfg, &mut stdout.lock())?;
        }
        Command::Bound { config } => {
            let cfg = harness::load_config(&config)?;
            harness::bound_cmd(&cfg, &mut stdout.lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
