use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clusterguard::verify::Faults;
use clusterguard_cli::{cmd_report, cmd_run, cmd_sweep, cmd_verify, CliError, ReportFormat};

#[derive(Debug, Parser)]
#[command(
    name = "clusterguard",
    version,
    about = "Byzantine-robust federated learning simulator"
)]
struct Cli {
    /// Overrides the master seed (for `sweep`, replaces the seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for client training.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an aggregator x attack x seed grid and write report.csv.
    Sweep {
        /// Sweep specification (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the sweep's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the implementations against their reference oracles.
    Verify {
        /// Deliberately break a component to exercise failure reporting.
        #[arg(long, value_name = "NAME")]
        inject_fault: Option<String>,
    },
    /// Render the accuracy matrix of a sweep directory.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormat,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out, cli.seed, cli.threads),
        Command::Sweep { config, out } => cmd_sweep(&config, out.as_deref(), cli.seed, cli.threads),
        Command::Verify { inject_fault } => {
            let mut faults = Faults::default();
            if let Some(name) = inject_fault {
                if !faults.inject(&name) {
                    return Err(CliError::Invalid(format!("unknown fault `{name}`")));
                }
            }
            cmd_verify(cli.seed.unwrap_or(0), faults, &mut std::io::stdout())
        }
        Command::Report { out, format } => {
            let table = cmd_report(&out, format)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
